"""Windowed-sinc resampling by factors of 2, offline and incremental.

Upsampling keeps the input on even output positions and fills odd positions
with a half-sample sinc interpolation. Downsampling averages the even samples
with the odd samples interpolated back onto the even grid. Edges are treated
as zero-padded; the incremental resamplers reproduce the offline result
sample for sample, holding back exactly as many samples as the filter needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_ZEROS = 16
FACTORS = (1, 2, 4)


@lru_cache(maxsize=None)
def _taps(zeros: int) -> np.ndarray:
    window = np.hanning(4 * zeros + 1)[1::2]
    t = np.arange(-zeros, zeros) + 0.5
    taps = np.sinc(t) * window
    taps /= taps.sum()
    taps.setflags(write=False)
    return taps


@dataclass(frozen=True)
class SincFilter:
    """Half-sample interpolator: ``2 * zeros`` Hann-windowed sinc taps with unit DC gain."""

    zeros: int = DEFAULT_ZEROS
    taps: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.zeros < 1:
            raise ValueError("zeros must be >= 1")
        object.__setattr__(self, "taps", _taps(self.zeros))


def _filt(f: SincFilter | int | None) -> SincFilter:
    if isinstance(f, SincFilter):
        return f
    return SincFilter(DEFAULT_ZEROS if f is None else f)


def _correlate_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if x.shape[-1] < len(taps):
        return np.zeros((*x.shape[:-1], max(x.shape[-1] - len(taps) + 1, 0)))
    return sliding_window_view(x, len(taps), axis=-1) @ taps


def _pad_time(x: np.ndarray, left: int, right: int) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    return np.pad(x, pad)


def _full_adjoint(g: np.ndarray, taps: np.ndarray, left: int, right: int) -> np.ndarray:
    # adjoint of x -> correlate_valid(pad(x, left, right), taps)
    k = len(taps)
    full = _correlate_valid(_pad_time(g, k - 1, k - 1), taps[::-1])
    return full[..., left:full.shape[-1] - right]


def upsample2(x: np.ndarray, f: SincFilter | int | None = None) -> np.ndarray:
    f = _filt(f)
    z = f.zeros
    x = np.asarray(x, dtype=np.float64)
    mid = _correlate_valid(_pad_time(x, z - 1, z), f.taps)
    out = np.empty((*x.shape[:-1], 2 * x.shape[-1]))
    out[..., 0::2] = x
    out[..., 1::2] = mid
    return out


def upsample2_adjoint(g: np.ndarray, f: SincFilter | int | None = None) -> np.ndarray:
    f = _filt(f)
    z = f.zeros
    return g[..., 0::2] + _full_adjoint(g[..., 1::2], f.taps, z - 1, z)


def downsample2(x: np.ndarray, f: SincFilter | int | None = None) -> np.ndarray:
    """Half-rate signal; an odd-length input gets one trailing zero first."""
    f = _filt(f)
    z = f.zeros
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        x = _pad_time(x, 0, 1)
    even, odd = x[..., 0::2], x[..., 1::2]
    return 0.5 * (even + _correlate_valid(_pad_time(odd, z, z - 1), f.taps))


def downsample2_adjoint(g: np.ndarray, length: int, f: SincFilter | int | None = None) -> np.ndarray:
    """Adjoint of :func:`downsample2` for an input of ``length`` samples."""
    f = _filt(f)
    z = f.zeros
    out = np.empty((*g.shape[:-1], 2 * g.shape[-1]))
    out[..., 0::2] = 0.5 * g
    out[..., 1::2] = 0.5 * _full_adjoint(g, f.taps, z, z - 1)
    return out[..., :length]


def _stages(factor: int) -> int:
    if factor not in FACTORS:
        raise ValueError(f"unsupported resampling factor {factor}, expected one of {FACTORS}")
    return factor.bit_length() - 1


def upsample(x, factor: int, f=None):
    for _ in range(_stages(factor)):
        x = upsample2(x, f)
    return x


def downsample(x, factor: int, f=None):
    for _ in range(_stages(factor)):
        x = downsample2(x, f)
    return x


def upsample_adjoint(g, factor: int, f=None):
    for _ in range(_stages(factor)):
        g = upsample2_adjoint(g, f)
    return g


def downsample_adjoint(g, factor: int, length: int, f=None):
    """Adjoint of ``downsample(., factor)`` for an input of ``length`` samples."""
    lengths = []
    for _ in range(_stages(factor)):
        lengths.append(length)
        length = (length + 1) // 2
    for n in reversed(lengths):
        g = downsample2_adjoint(g, n, f)
    return g


def resample_factor(x, factor: int, up: bool = True, f=None):
    return upsample(x, factor, f) if up else downsample(x, factor, f)


def upsample_holdback(factor: int, zeros: int = DEFAULT_ZEROS) -> float:
    """Future input (base-rate samples) the upsampling chain needs, per output sample."""
    return sum((zeros - 0.5) / 2 ** s for s in range(_stages(factor)))


def downsample_holdback(factor: int, zeros: int = DEFAULT_ZEROS) -> float:
    """Future high-rate input, in output-rate samples, the downsampling chain needs."""
    return sum((zeros - 0.5) / 2 ** s for s in range(_stages(factor)))


class StreamingUpsampler2:
    """Incremental :func:`upsample2` over the last axis of ``[..., T]`` chunks."""

    def __init__(self, lead_shape: tuple = (), f: SincFilter | int | None = None):
        self.filter = _filt(f)
        z = self.filter.zeros
        self._buf = np.zeros((*lead_shape, z - 1))

    def push(self, x: np.ndarray) -> np.ndarray:
        z = self.filter.zeros
        buf = np.concatenate([self._buf, x], axis=-1)
        n = buf.shape[-1] - 2 * z + 1
        if n <= 0:
            self._buf = buf
            return np.zeros((*buf.shape[:-1], 0))
        out = np.empty((*buf.shape[:-1], 2 * n))
        out[..., 0::2] = buf[..., z - 1:z - 1 + n]
        out[..., 1::2] = _correlate_valid(buf, self.filter.taps)
        self._buf = buf[..., n:]
        return out

    def flush(self) -> np.ndarray:
        out = self.push(np.zeros((*self._buf.shape[:-1], self.filter.zeros)))
        return out


class StreamingDownsampler2:
    """Incremental :func:`downsample2`."""

    def __init__(self, lead_shape: tuple = (), f: SincFilter | int | None = None):
        self.filter = _filt(f)
        z = self.filter.zeros
        self._even = np.zeros((*lead_shape, 0))
        self._odd = np.zeros((*lead_shape, z))  # left zero padding
        self._count = 0

    def push(self, x: np.ndarray) -> np.ndarray:
        start = self._count % 2
        self._count += x.shape[-1]
        self._even = np.concatenate([self._even, x[..., start::2]], axis=-1)
        self._odd = np.concatenate([self._odd, x[..., 1 - start::2]], axis=-1)
        return self._emit()

    def _emit(self) -> np.ndarray:
        taps = self.filter.taps
        n = min(self._even.shape[-1], self._odd.shape[-1] - len(taps) + 1)
        if n <= 0:
            return np.zeros((*self._even.shape[:-1], 0))
        interp = _correlate_valid(self._odd[..., :n + len(taps) - 1], taps)
        out = 0.5 * (self._even[..., :n] + interp)
        self._even = self._even[..., n:]
        self._odd = self._odd[..., n:]
        return out

    def flush(self) -> np.ndarray:
        lead = self._even.shape[:-1]
        pad = self.filter.zeros - 1 + (self._count % 2)
        self._odd = np.concatenate([self._odd, np.zeros((*lead, pad))], axis=-1)
        return self._emit()


class StreamingResampler:
    """Chain of incremental x2 stages reaching ``factor`` in either direction."""

    def __init__(self, factor: int, up: bool, lead_shape: tuple = (), f=None):
        cls = StreamingUpsampler2 if up else StreamingDownsampler2
        self.lead_shape = tuple(lead_shape)
        self.stages = [cls(lead_shape, f) for _ in range(_stages(factor))]

    def push(self, x: np.ndarray) -> np.ndarray:
        for stage in self.stages:
            x = stage.push(x)
        return x

    def flush(self) -> np.ndarray:
        out = np.zeros((*self.lead_shape, 0))
        for stage in self.stages:
            out = np.concatenate([stage.push(out), stage.flush()], axis=-1)
        return out
