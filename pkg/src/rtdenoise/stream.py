"""Causal frame-by-frame inference.

:class:`DemucsStreamer` evaluates the same computation graph as
:func:`rtdenoise.model.forward`, incrementally. Every stage (resamplers,
strided convolutions, LSTM, transposed convolutions) keeps just enough
history to produce the next outputs exactly, and the streamer emits an
output sample as soon as every input it depends on has arrived. The one
difference from an offline pass is normalization: offline divides by the
std of the whole signal, the streamer by the std of everything seen so far
(see :func:`running_scale`). With that per-sample scale handed to
``forward(..., scale=...)`` the two agree to rounding error.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import resample as rs
from .model import (DemucsConfig, ModelParams, bottleneck, check_params, drywet, frame_length,
                    valid_length)
from .tensor import conv1d, glu, overlap_add, relu, transposed_contributions

LOOKAHEAD_MS = 3.0


def running_scale(x: np.ndarray, floor: float, count: int = 0, total: float = 0.0,
                  total_sq: float = 0.0):
    """``floor + std(x[:t + 1])`` for every ``t``, continuing from prior moments.

    Returns ``(scale, (count, total, total_sq))`` so the moments can be carried
    into the next chunk.
    """
    x = np.asarray(x, dtype=np.float64)
    n = count + np.arange(1, len(x) + 1)
    s1 = total + np.cumsum(x)
    s2 = total_sq + np.cumsum(x * x)
    mean = s1 / n
    var = np.maximum(s2 / n - mean * mean, 0.0)
    if len(x):
        moments = (int(n[-1]), float(s1[-1]), float(s2[-1]))
    else:
        moments = (count, total, total_sq)
    return floor + np.sqrt(var), moments


@dataclass
class FrameGeometry:
    sample_rate: int
    stride: int
    frame: int
    lookahead: int

    @property
    def total_frame(self) -> int:
        return self.frame + self.lookahead

    def ms(self, samples: int) -> int:
        # whole milliseconds, truncated
        return samples * 1000 // self.sample_rate

    @property
    def stride_ms(self) -> int:
        return self.ms(self.stride)

    @property
    def frame_ms(self) -> int:
        return self.ms(self.frame)

    @property
    def lookahead_ms(self) -> int:
        return self.ms(self.lookahead)

    @property
    def total_frame_ms(self) -> int:
        return self.ms(self.total_frame)


def frame_geometry(config: DemucsConfig, lookahead_ms: float = LOOKAHEAD_MS) -> FrameGeometry:
    lookahead = round(lookahead_ms * config.sample_rate / 1000)
    needed = (rs.upsample_holdback(config.resample, config.resample_zeros)
              + rs.downsample_holdback(config.resample, config.resample_zeros))
    if needed > lookahead:
        raise ValueError(f"resampling filters need {needed} samples of lookahead, "
                         f"only {lookahead} configured")
    return FrameGeometry(config.sample_rate, config.total_stride, frame_length(config), lookahead)


def _rewrite(x, weight, bias):
    """1x1 conv + GLU that tolerates empty chunks."""
    if x.shape[-1] == 0:
        return np.zeros((x.shape[0], weight.shape[0] // 2, 0))
    return glu(conv1d(x, weight, bias))


class _ConvStage:
    """Valid strided conv over a growing signal."""

    def __init__(self, weight, bias, stride, channels):
        self.weight, self.bias, self.stride = weight, bias, stride
        self.buf = np.zeros((1, channels, 0))

    def push(self, x):
        buf = np.concatenate([self.buf, x], axis=-1)
        kernel = self.weight.shape[-1]
        n = (buf.shape[-1] - kernel) // self.stride + 1 if buf.shape[-1] >= kernel else 0
        if n <= 0:
            self.buf = buf
            return np.zeros((1, self.weight.shape[0], 0))
        out = conv1d(buf[..., :(n - 1) * self.stride + kernel], self.weight, self.bias, self.stride)
        self.buf = buf[..., n * self.stride:]
        return out


class _ConvTransposeStage:
    """Transposed conv with an overlap-add tail of not-yet-complete outputs."""

    def __init__(self, weight, bias, stride):
        self.weight, self.bias, self.stride = weight, bias, stride
        c_out, kernel = weight.shape[1], weight.shape[2]
        self.tail = np.zeros((1, c_out, max(kernel - stride, 0)))

    def push(self, x):
        n = x.shape[-1]
        c_out, kernel = self.weight.shape[1], self.weight.shape[2]
        if n == 0:
            return np.zeros((1, c_out, 0))
        contrib = overlap_add(transposed_contributions(x, self.weight), self.stride)
        acc = np.zeros((1, c_out, max(contrib.shape[-1], n * self.stride)))
        acc[..., :contrib.shape[-1]] += contrib
        acc[..., :self.tail.shape[-1]] += self.tail
        done = n * self.stride
        self.tail = acc[..., done:]
        return acc[..., :done] + self.bias[None, :, None]

    def flush(self):
        out = self.tail + self.bias[None, :, None]
        self.tail = self.tail[..., :0]
        return out


class _Fifo:
    def __init__(self, lead=(1, 1)):
        self.data = np.zeros((*lead, 0))

    def put(self, x):
        self.data = np.concatenate([self.data, x], axis=-1)

    def take(self, n):
        out, self.data = self.data[..., :n], self.data[..., n:]
        return out

    def __len__(self):
        return self.data.shape[-1]


class DemucsStreamer:
    """Single-stream causal enhancer; push any chunk sizes, then :meth:`flush`.

    Not safe for concurrent pushes; independent streamers share nothing but
    the read-only parameters.
    """

    def __init__(self, params: ModelParams, config: DemucsConfig, dry: float = 0.0,
                 lookahead_ms: float = LOOKAHEAD_MS):
        if not config.causal:
            raise ValueError("streaming requires a causal model")
        if not 0.0 <= dry <= 1.0:
            raise ValueError(f"dry must lie in [0, 1], got {dry}")
        check_params(params, config)
        self.params, self.config, self.dry = params, config, dry
        self.geometry = frame_geometry(config, lookahead_ms)
        z = config.resample_zeros
        self.moments = (0, 0.0, 0.0)
        self.upsampler = rs.StreamingResampler(config.resample, True, (1, 1), z)
        self.downsampler = rs.StreamingResampler(config.resample, False, (1, 1), z)
        self.encoder = []
        for i in range(config.depth):
            p = f"encoder.{i}."
            c_in, _ = config.encoder_channels(i)
            self.encoder.append(_ConvStage(params[p + "conv.weight"], params[p + "conv.bias"],
                                           config.stride, c_in))
        self.decoder = {i: _ConvTransposeStage(params[f"decoder.{i}.conv_tr.weight"],
                                               params[f"decoder.{i}.conv_tr.bias"], config.stride)
                        for i in range(config.depth)}
        self.skips = [_Fifo((1, config.encoder_channels(i)[1])) for i in range(config.depth)]
        self.lstm_state = None
        self.dry_in = _Fifo()  # raw input awaiting its enhanced counterpart
        self.scales = _Fifo()
        self.total_in = 0
        self.total_out = 0
        self.frames_processed = 0
        self.closed = False

    @property
    def stride(self) -> int:
        return self.geometry.stride

    def push(self, samples) -> np.ndarray:
        """Feed raw samples, get back every enhanced sample that is now final."""
        if self.closed:
            raise RuntimeError("push after close")
        x = np.asarray(samples, dtype=np.float64).reshape(-1)
        if x.size == 0:
            return np.zeros(0)
        if self.config.normalize:
            scale, self.moments = running_scale(x, self.config.floor, *self.moments)
        else:
            scale = np.ones_like(x)
        self.total_in += x.size
        self.dry_in.put(x[None, None])
        self.scales.put(scale[None, None])
        up = self.upsampler.push((x / scale)[None, None])
        return self._run(up)

    def flush(self) -> np.ndarray:
        """Zero-pad to the model's valid length, drain every stage, close the stream."""
        if self.closed:
            raise RuntimeError("stream already flushed")
        self.closed = True
        if self.total_in == 0:
            return np.zeros(0)
        pad = valid_length(self.config, self.total_in) - self.total_in
        up = self.upsampler.push(np.zeros((1, 1, pad)))
        up = np.concatenate([up, self.upsampler.flush()], axis=-1)
        return self._run(up, final=True)

    def _run(self, h, final=False) -> np.ndarray:
        params, config = self.params, self.config
        for i, stage in enumerate(self.encoder):
            h = _rewrite(relu(stage.push(h)), params[f"encoder.{i}.rewrite.weight"],
                         params[f"encoder.{i}.rewrite.bias"])
            self.skips[i].put(h)
        if h.shape[-1]:
            self.frames_processed += h.shape[-1]
            h, self.lstm_state = bottleneck(params, config, h, self.lstm_state)
        for i in reversed(range(config.depth)):
            h = self._decode(i, h)
            if final:
                h = np.concatenate([h, self._decode_tail(i)], axis=-1)
        y = self.downsampler.push(h)
        if final:
            y = np.concatenate([y, self.downsampler.flush()], axis=-1)
        return self._emit(y)

    def _decode(self, i, h):
        skip = self.skips[i].take(h.shape[-1])
        assert skip.shape[-1] == h.shape[-1], "encoder fell behind decoder"
        g = _rewrite(h + skip, self.params[f"decoder.{i}.rewrite.weight"],
                     self.params[f"decoder.{i}.rewrite.bias"])
        o = self.decoder[i].push(g)
        return relu(o) if i > 0 else o

    def _decode_tail(self, i):
        # once no frames are left, the overlap-add remainder is final
        o = self.decoder[i].flush()
        return relu(o) if i > 0 else o

    def _emit(self, y) -> np.ndarray:
        n = min(y.shape[-1], self.total_in - self.total_out)
        y = y[..., :n]
        raw = self.dry_in.take(n)
        out = drywet(raw, y * self.scales.take(n), self.dry)
        self.total_out += n
        return out.reshape(-1)


def stream_init(params: ModelParams, config: DemucsConfig, dry: float = 0.0) -> DemucsStreamer:
    return DemucsStreamer(params, config, dry)


@dataclass
class StreamReport:
    frame_size_ms: int
    stride_ms: int
    lookahead_ms: int
    stride: int
    sample_rate: int
    frame_times: list = field(default_factory=list, repr=False)
    pinned: bool = False

    @property
    def mean_frame_time(self) -> float:
        return float(np.mean(self.frame_times)) if self.frame_times else 0.0

    @property
    def p95_frame_time(self) -> float:
        return float(np.percentile(self.frame_times, 95)) if self.frame_times else 0.0

    @property
    def stride_seconds(self) -> float:
        return self.stride / self.sample_rate

    @property
    def rtf(self) -> float:
        """Mean time to process one frame divided by the stride duration."""
        return self.mean_frame_time / self.stride_seconds

    def to_dict(self) -> dict:
        return {
            "frame_size_ms": self.frame_size_ms,
            "stride_ms": self.stride_ms,
            "lookahead_ms": self.lookahead_ms,
            "frames": len(self.frame_times),
            "mean_frame_ms": 1000 * self.mean_frame_time,
            "p95_frame_ms": 1000 * self.p95_frame_time,
            "rtf": self.rtf,
            "affinity": "pinned" if self.pinned else "unpinned",
        }


def _pin_single_core():
    if not hasattr(os, "sched_setaffinity"):
        return None
    previous = os.sched_getaffinity(0)
    try:
        os.sched_setaffinity(0, {min(previous)})
    except OSError:
        return None
    return previous


def bench(streamer, signal, single_core: bool = False, geometry: FrameGeometry | None = None,
          clock=time.perf_counter) -> StreamReport:
    """Time each one-stride push of ``signal`` through ``streamer``.

    ``streamer`` is anything with ``push`` and, unless ``geometry`` is given, a
    ``geometry`` attribute.
    """
    geometry = geometry or streamer.geometry
    previous = _pin_single_core() if single_core else None
    report = StreamReport(geometry.total_frame_ms, geometry.stride_ms, geometry.lookahead_ms,
                          geometry.stride, geometry.sample_rate, pinned=previous is not None)
    signal = np.asarray(signal, dtype=np.float64).reshape(-1)
    try:
        for start in range(0, len(signal) - geometry.stride + 1, geometry.stride):
            chunk = signal[start:start + geometry.stride]
            t0 = clock()
            streamer.push(chunk)
            report.frame_times.append(clock() - t0)
    finally:
        if previous is not None:
            os.sched_setaffinity(0, previous)
    return report
