"""Waveform U-Net denoiser: conv encoder, LSTM bottleneck, transposed-conv decoder.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(``encoder.0.conv.weight``, ``lstm.1.w_hh``, ...). Every shape is a function
of :class:`DemucsConfig`; :func:`param_shapes` is the single source of truth
and :func:`check_params` audits a parameter set against it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import resample as rs
from .tensor import (LstmSpec, ShapeError, conv1d, conv_transpose1d, glu, linear, lstm_cell,
                     relu)

ModelParams = dict  # str -> np.ndarray


@dataclass(frozen=True)
class DemucsConfig:
    depth: int = 5
    hidden: int = 48
    kernel: int = 8
    stride: int = 4
    resample: int = 4
    causal: bool = True
    normalize: bool = True
    floor: float = 1e-3
    sample_rate: int = 16000
    resample_zeros: int = rs.DEFAULT_ZEROS

    def __post_init__(self):
        if self.depth < 1 or self.hidden < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError(f"invalid config {self}")
        if self.resample not in rs.FACTORS:
            raise ValueError(f"resample must be one of {rs.FACTORS}, got {self.resample}")
        if self.stride ** self.depth % self.resample:
            raise ValueError("stride**depth must be divisible by the resampling factor")
        if self.floor <= 0:
            raise ValueError("floor must be positive")

    @property
    def total_stride(self) -> int:
        """Input samples per bottleneck frame."""
        return self.stride ** self.depth // self.resample

    @property
    def lstm_hidden(self) -> int:
        return self.hidden * 2 ** (self.depth - 1)

    @property
    def lstm_spec(self) -> LstmSpec:
        return LstmSpec(hidden=self.lstm_hidden, layers=2, bidirectional=not self.causal)

    def encoder_channels(self, i: int) -> tuple[int, int]:
        """(in, out) channels of encoder layer ``i`` (0-based)."""
        return (1 if i == 0 else self.hidden * 2 ** (i - 1)), self.hidden * 2 ** i

    def decoder_channels(self, i: int) -> tuple[int, int]:
        """(in, out) channels of decoder layer ``i`` (0-based, same scale as encoder ``i``)."""
        c_in, c_out = self.encoder_channels(i)
        return c_out, c_in

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: DemucsConfig) -> dict[str, tuple]:
    shapes = {}
    k = config.kernel
    for i in range(config.depth):
        c_in, c_out = config.encoder_channels(i)
        shapes[f"encoder.{i}.conv.weight"] = (c_out, c_in, k)
        shapes[f"encoder.{i}.conv.bias"] = (c_out,)
        shapes[f"encoder.{i}.rewrite.weight"] = (2 * c_out, c_out, 1)
        shapes[f"encoder.{i}.rewrite.bias"] = (2 * c_out,)
    hid = config.lstm_hidden
    directions = ("", "r_") if not config.causal else ("",)
    for layer in range(2):
        n_in = hid if layer == 0 else hid * len(directions)
        for d in directions:
            shapes[f"lstm.{layer}.{d}w_ih"] = (4 * hid, n_in)
            shapes[f"lstm.{layer}.{d}w_hh"] = (4 * hid, hid)
            shapes[f"lstm.{layer}.{d}bias"] = (4 * hid,)
    if not config.causal:
        shapes["lstm.merge.weight"] = (hid, 2 * hid)
        shapes["lstm.merge.bias"] = (hid,)
    for i in reversed(range(config.depth)):
        c_in, c_out = config.decoder_channels(i)
        shapes[f"decoder.{i}.rewrite.weight"] = (2 * c_in, c_in, 1)
        shapes[f"decoder.{i}.rewrite.bias"] = (2 * c_in,)
        shapes[f"decoder.{i}.conv_tr.weight"] = (c_in, c_out, k)
        shapes[f"decoder.{i}.conv_tr.bias"] = (c_out,)
    return shapes


def _fan_in(name: str, shape: tuple, config: DemucsConfig) -> int:
    if ".conv_tr." in name:
        # each output sample sees c_in * ceil(K / S) products
        return shape[0] * math.ceil(shape[2] / config.stride)
    if name.startswith("lstm."):
        return shape[1]
    return int(np.prod(shape[1:]))


def init_params(config: DemucsConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform init, zero biases.

    Weights are drawn from U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)) and rounded
    to float32 precision, so a saved-and-reloaded model is bit-identical.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
            continue
        bound = math.sqrt(6.0 / _fan_in(name, shape, config))
        w = rng.uniform(-bound, bound, size=shape)
        params[name] = w.astype(np.float32).astype(np.float64)
    return params


def check_params(params: ModelParams, config: DemucsConfig) -> None:
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameter names do not match config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"tensor {name} has shape {tuple(params[name].shape)}, config implies {shape}")


def valid_length(config: DemucsConfig, length: int) -> int:
    """Smallest input length >= ``length`` that the valid convolutions map back onto itself."""
    n = length * config.resample
    for _ in range(config.depth):
        n = max(math.ceil((n - config.kernel) / config.stride) + 1, 1)
    for _ in range(config.depth):
        n = (n - 1) * config.stride + config.kernel
    return math.ceil(n / config.resample)


def frame_length(config: DemucsConfig) -> int:
    """Input samples spanned by one bottleneck frame (the model's receptive frame)."""
    return valid_length(config, 1)


def normalization_scale(config: DemucsConfig, x: np.ndarray) -> np.ndarray:
    """Per-item divisor ``floor + std(x)``, shaped ``[B, 1, 1]``."""
    if not config.normalize:
        return np.ones((x.shape[0], 1, 1))
    return config.floor + x.std(axis=-1, keepdims=True)


def encoder_layer(params, i, x, stride, tape=None):
    p = f"encoder.{i}."
    h = conv1d(x, params[p + "conv.weight"], params[p + "conv.bias"], stride)
    a = relu(h)
    r = conv1d(a, params[p + "rewrite.weight"], params[p + "rewrite.bias"])
    out = glu(r)
    if tape is not None:
        tape.append({"x": x, "h": h, "a": a, "r": r})
    return out


def decoder_layer(params, i, x, stride, tape=None):
    """Rewrite + GLU + transposed conv; ReLU on every layer but the last one (i == 0)."""
    p = f"decoder.{i}."
    r = conv1d(x, params[p + "rewrite.weight"], params[p + "rewrite.bias"])
    g = glu(r)
    o = conv_transpose1d(g, params[p + "conv_tr.weight"], params[p + "conv_tr.bias"], stride)
    if tape is not None:
        tape.append({"x": x, "r": r, "g": g, "o": o})
    return relu(o) if i > 0 else o


def _lstm_layer(seq, params, prefix, h, c, reverse=False, tape=None):
    w_ih, w_hh, bias = params[prefix + "w_ih"], params[prefix + "w_hh"], params[prefix + "bias"]
    steps = seq.shape[1]
    hs = np.zeros((seq.shape[0], steps, w_hh.shape[1]))
    cache = []
    for t in (range(steps - 1, -1, -1) if reverse else range(steps)):
        h_prev, c_prev = h, c
        h, c, gates = lstm_cell(seq[:, t], h, c, w_ih, w_hh, bias)
        hs[:, t] = h
        if tape is not None:
            cache.append((t, h_prev, c_prev, gates, c))
    if tape is not None:
        tape.append({"prefix": prefix, "x": seq, "reverse": reverse, "steps": cache})
    return hs, h, c


def bottleneck(params, config: DemucsConfig, z, state=None, tape=None):
    """Residual sequence model ``LSTM(z) + z`` on ``[B, C, T]``.

    For the causal model ``state`` carries ``(h, c)`` across calls and the new
    state is returned alongside the output.
    """
    batch = z.shape[0]
    hid = config.lstm_hidden
    seq = z.transpose(0, 2, 1)
    if config.causal:
        if state is None:
            state = (np.zeros((2, batch, hid)), np.zeros((2, batch, hid)))
        hn, cn = [], []
        for layer in range(2):
            seq, h, c = _lstm_layer(seq, params, f"lstm.{layer}.", state[0][layer], state[1][layer],
                                    tape=tape)
            hn.append(h)
            cn.append(c)
        out = seq.transpose(0, 2, 1)
        new_state = (np.stack(hn), np.stack(cn))
    else:
        zeros = np.zeros((batch, hid))
        for layer in range(2):
            fwd, _, _ = _lstm_layer(seq, params, f"lstm.{layer}.", zeros, zeros, tape=tape)
            bwd, _, _ = _lstm_layer(seq, params, f"lstm.{layer}.r_", zeros, zeros, reverse=True,
                                    tape=tape)
            seq = np.concatenate([fwd, bwd], axis=2)
        merged_in = seq.transpose(0, 2, 1)
        out = linear(merged_in, params["lstm.merge.weight"], params["lstm.merge.bias"])
        if tape is not None:
            tape.append({"merge_in": merged_in})
        new_state = None
    return out + z, new_state


def forward(params: ModelParams, config: DemucsConfig, x: np.ndarray, scale=None,
            tape: dict | None = None) -> np.ndarray:
    """Enhance ``x[B, 1, T]``; the output has exactly the input's length.

    ``scale`` overrides the normalization divisor. It may be per item
    (``[B, 1, 1]``) or per sample (``[B, 1, T]``): input sample ``t`` is divided
    by ``scale[..., t]`` and output sample ``t`` multiplied by it. The
    streaming engine's running-std normalization is exactly this per-sample
    form. ``tape``, if given, is filled with the intermediates needed for
    backpropagation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != 1:
        raise ShapeError(f"expected mono input [B, 1, T], got {x.shape}")
    check_params(params, config)
    length = x.shape[-1]
    if scale is None:
        scale = normalization_scale(config, x)
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim != 3 or scale.shape[-1] not in (1, length):
        raise ShapeError(f"scale must be [B, 1, 1] or [B, 1, T], got {scale.shape}")
    padded = valid_length(config, length)
    h = np.pad(x / scale, ((0, 0), (0, 0), (0, padded - length)))
    h = rs.upsample(h, config.resample, config.resample_zeros)
    if tape is not None:
        tape.update(length=length, padded=padded, scale=scale, up_length=h.shape[-1],
                    encoder=[], lstm=[], decoder=[])
    enc_tape = tape["encoder"] if tape is not None else None
    skips = []
    for i in range(config.depth):
        h = encoder_layer(params, i, h, config.stride, enc_tape)
        skips.append(h)
    h, _ = bottleneck(params, config, h, tape=tape["lstm"] if tape is not None else None)
    if tape is not None:
        tape["z"] = skips[-1]
    dec_tape = tape["decoder"] if tape is not None else None
    for i in reversed(range(config.depth)):
        skip = skips[i]
        n = min(h.shape[-1], skip.shape[-1])
        h = h[..., :n] + skip[..., :n]
        h = decoder_layer(params, i, h, config.stride, dec_tape)
    if tape is not None:
        tape["dec_length"] = h.shape[-1]
    h = rs.downsample(h, config.resample, config.resample_zeros)
    return h[..., :length] * scale


def drywet(x: np.ndarray, y_hat: np.ndarray, dry: float) -> np.ndarray:
    """``dry * x + (1 - dry) * y_hat``."""
    if not 0.0 <= dry <= 1.0:
        raise ValueError(f"dry must lie in [0, 1], got {dry}")
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if x.shape != y_hat.shape:
        raise ShapeError(f"drywet shapes differ: {x.shape} vs {y_hat.shape}")
    if dry == 0.0:
        return y_hat.copy()
    if dry == 1.0:
        return x.copy()
    return dry * x + (1.0 - dry) * y_hat
