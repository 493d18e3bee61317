"""Numeric kernel: the handful of 1-D ops the model is built from.

Signals and activations are plain float64 numpy arrays laid out as
``[batch, channels, time]``. Every op here is pure and does no implicit
padding; padding is the caller's business.

Weight layouts
--------------
conv1d            ``weight[c_out, c_in, K]``, ``bias[c_out]``
conv_transpose1d  ``weight[c_in, c_out, K]``, ``bias[c_out]``
linear            ``weight[c_out, c_in]``,    ``bias[c_out]``
LSTM layer        ``w_ih[4H, in]``, ``w_hh[4H, H]``, ``bias[4H]`` with the
                  gate blocks stacked in the order (i, f, g, o).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    bias: bool = True

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.kernel, self.stride) < 1:
            raise ValueError(f"invalid conv spec {self}")

    def out_length(self, length: int) -> int:
        return (length - self.kernel) // self.stride + 1

    def transposed_length(self, length: int) -> int:
        return (length - 1) * self.stride + self.kernel


@dataclass(frozen=True)
class LstmSpec:
    hidden: int
    layers: int = 2
    bidirectional: bool = False

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1


def _check_rank3(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{name} must be [batch, channels, time], got shape {x.shape}")


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1) -> np.ndarray:
    """Valid 1-D convolution (cross-correlation), ``T' = (T - K) // S + 1``."""
    _check_rank3(x)
    c_out, c_in, kernel = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d expects {c_in} input channels, got {x.shape[1]}")
    if x.shape[2] < kernel:
        raise ShapeError(f"input shorter than kernel ({x.shape[2]} < {kernel})")
    if kernel == 1 and stride == 1:
        out = np.matmul(weight[:, :, 0], x)
    else:
        # [B, T', c_in * K] @ [c_in * K, c_out]
        frames = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
        cols = frames.transpose(0, 2, 1, 3).reshape(x.shape[0], -1, c_in * kernel)
        out = np.matmul(cols, weight.reshape(c_out, -1).T).transpose(0, 2, 1)
    if bias is not None:
        out += bias[None, :, None]
    return out


def conv_transpose1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                     stride: int = 1) -> np.ndarray:
    """Transposed convolution, ``T'' = (T - 1) * S + K``.

    Without bias this is the exact adjoint of :func:`conv1d` sharing ``weight``.
    """
    _check_rank3(x)
    c_in, c_out, kernel = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv_transpose1d expects {c_in} input channels, got {x.shape[1]}")
    batch, _, length = x.shape
    if length == 0:
        out = np.zeros((batch, c_out, 0))
    else:
        out = overlap_add(transposed_contributions(x, weight), stride)
    if bias is not None:
        out += bias[None, :, None]
    return out


def transposed_contributions(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``contrib[b, o, k, t] = sum_c x[b, c, t] * weight[c, o, k]``."""
    c_in, c_out, kernel = weight.shape
    flat = np.matmul(weight.reshape(c_in, c_out * kernel).T, x)
    return flat.reshape(x.shape[0], c_out, kernel, x.shape[2])


def overlap_add(contrib: np.ndarray, stride: int) -> np.ndarray:
    """Sum ``contrib[..., k, t]`` into position ``t * stride + k``."""
    *lead, kernel, length = contrib.shape
    out = np.zeros((*lead, (length - 1) * stride + kernel))
    stop = (length - 1) * stride + 1
    for k in range(kernel):
        out[..., k:k + stop:stride] += contrib[..., k, :]
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glu(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Gated linear unit: first half of ``axis`` times sigmoid of the second half."""
    channels = x.shape[axis]
    if channels % 2:
        raise ShapeError(f"glu needs an even channel count, got {channels}")
    value, gate = np.split(x, 2, axis=axis)
    return value * sigmoid(gate)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-timestep affine map on ``[B, C_in, T]``."""
    _check_rank3(x)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} input channels, got {x.shape[1]}")
    out = np.matmul(weight, x)
    if bias is not None:
        out += bias[None, :, None]
    return out


def lstm_cell(x_t, h, c, w_ih, w_hh, bias):
    """One LSTM step. Returns ``(h, c, gates)`` with activated gates ``[B, 4H]``."""
    hidden = h.shape[-1]
    pre = x_t @ w_ih.T + h @ w_hh.T + bias
    gates = np.empty_like(pre)
    gates[:, :2 * hidden] = sigmoid(pre[:, :2 * hidden])
    gates[:, 2 * hidden:3 * hidden] = np.tanh(pre[:, 2 * hidden:3 * hidden])
    gates[:, 3 * hidden:] = sigmoid(pre[:, 3 * hidden:])
    i, f, g, o = np.split(gates, 4, axis=1)
    c = f * c + i * g
    h = o * np.tanh(c)
    return h, c, gates


def lstm_layer(seq: np.ndarray, w_ih, w_hh, bias, h0=None, c0=None, reverse=False):
    """Run one LSTM layer over ``seq[B, T, in]``.

    Returns ``(hs[B, T, H], (h, c))``; with ``reverse`` the sequence is
    consumed from the end and ``hs`` is returned in original time order.
    """
    batch, steps, _ = seq.shape
    hidden = w_hh.shape[1]
    h = np.zeros((batch, hidden)) if h0 is None else h0
    c = np.zeros((batch, hidden)) if c0 is None else c0
    hs = np.zeros((batch, steps, hidden))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h, c, _ = lstm_cell(seq[:, t], h, c, w_ih, w_hh, bias)
        hs[:, t] = h
    return hs, (h, c)


def lstm_forward(x: np.ndarray, weights: list[dict], spec: LstmSpec, state=None):
    """Stacked unidirectional LSTM over ``x[B, C, T]``.

    ``weights`` holds one ``{"w_ih", "w_hh", "bias"}`` dict per layer and
    ``state`` is ``(h, c)``, each ``[layers, B, hidden]``, or None for zeros.
    The returned final state continues the recurrence exactly, so running two
    halves back to back equals one run over the whole sequence.
    """
    _check_rank3(x)
    if spec.bidirectional:
        raise ValueError("lstm_forward is unidirectional; use bilstm_forward")
    batch, channels, _ = x.shape
    if channels != weights[0]["w_ih"].shape[1]:
        raise ShapeError(f"lstm expects {weights[0]['w_ih'].shape[1]} channels, got {channels}")
    if state is None:
        h0 = np.zeros((spec.layers, batch, spec.hidden))
        c0 = np.zeros_like(h0)
    else:
        h0, c0 = state
        if h0.shape != (spec.layers, batch, spec.hidden) or c0.shape != h0.shape:
            raise ShapeError(f"lstm state shape {h0.shape} does not match "
                             f"{(spec.layers, batch, spec.hidden)}")
    seq = x.transpose(0, 2, 1)
    hn, cn = [], []
    for layer, w in enumerate(weights):
        seq, (h, c) = lstm_layer(seq, w["w_ih"], w["w_hh"], w["bias"], h0[layer], c0[layer])
        hn.append(h)
        cn.append(c)
    return seq.transpose(0, 2, 1), (np.stack(hn), np.stack(cn))


def bilstm_forward(x: np.ndarray, weights: list[dict], spec: LstmSpec) -> np.ndarray:
    """Stacked bidirectional LSTM; returns ``[B, 2 * hidden, T]`` (forward then reverse)."""
    _check_rank3(x)
    seq = x.transpose(0, 2, 1)
    for w in weights:
        fwd, _ = lstm_layer(seq, w["w_ih"], w["w_hh"], w["bias"])
        bwd, _ = lstm_layer(seq, w["r_w_ih"], w["r_w_hh"], w["r_bias"], reverse=True)
        seq = np.concatenate([fwd, bwd], axis=2)
    return seq.transpose(0, 2, 1)
