"""Waveform augmentations on (clean, noise) pairs.

Every function takes a :class:`PairBatch` and an explicit
``numpy.random.Generator`` and returns a new batch; inputs are never modified.
The noisy mixture is always recomputed as ``clean + noise``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

# echo delays are scaled by U[1 - JITTER, 1 + JITTER]
DEFAULT_JITTER = 0.1
DEFAULT_MAX_SHIFT_S = 0.25
ECHO_FLOOR = 1e-3


@dataclass(frozen=True)
class PairBatch:
    clean: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        clean = np.asarray(self.clean, dtype=np.float64)
        noise = np.asarray(self.noise, dtype=np.float64)
        if clean.shape != noise.shape or clean.ndim != 3:
            raise ValueError(f"clean and noise must share a [B, 1, T] shape, got {clean.shape} and {noise.shape}")
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "noise", noise)

    @property
    def noisy(self) -> np.ndarray:
        return self.clean + self.noise

    @property
    def shape(self):
        return self.clean.shape


def shift(batch: PairBatch, max_shift: int, rng: np.random.Generator) -> PairBatch:
    """Crop each item at a random offset in ``[0, max_shift]``, keeping ``T - max_shift`` samples.

    Clean and noise of one item move together, so their alignment is kept.
    """
    length = batch.shape[-1]
    if not 0 <= max_shift < length:
        raise ValueError(f"max_shift must lie in [0, {length}), got {max_shift}")
    if max_shift == 0:
        return batch
    keep = length - max_shift
    offsets = rng.integers(0, max_shift + 1, size=batch.shape[0])
    clean = np.stack([batch.clean[b, :, k:k + keep] for b, k in enumerate(offsets)])
    noise = np.stack([batch.noise[b, :, k:k + keep] for b, k in enumerate(offsets)])
    return PairBatch(clean, noise)


def remix(batch: PairBatch, rng: np.random.Generator) -> PairBatch:
    """Shuffle the noise rows across the batch."""
    if batch.shape[0] < 2:
        warnings.warn("remix needs at least two items; batch returned unchanged", stacklevel=2)
        return batch
    perm = rng.permutation(batch.shape[0])
    return PairBatch(batch.clean, batch.noise[perm])


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def lowpass_kernel(cutoff: float, zeros: int = 16, max_half: int | None = None) -> np.ndarray:
    """Hann-windowed sinc lowpass, ``cutoff`` in cycles per sample, odd length, unit DC gain.

    The half-length grows as ``zeros / cutoff / 2`` so the transition band
    stays a fixed fraction of the cutoff.
    """
    if not 0 < cutoff < 0.5:
        raise ValueError(f"cutoff must lie in (0, 0.5), got {cutoff}")
    half = max(int(zeros / cutoff / 2), 1)
    if max_half is not None:
        half = min(half, max_half)
    n = np.arange(-half, half + 1)
    h = 2 * cutoff * np.sinc(2 * cutoff * n) * np.hanning(2 * half + 3)[1:-1]
    return h / h.sum()


def lowpass(x: np.ndarray, cutoff: float, zeros: int = 16) -> np.ndarray:
    """Zero-phase lowpass along the last axis, zero-padded at the edges."""
    if cutoff <= 0:
        return np.zeros_like(x)
    if cutoff >= 0.5:
        return x.copy()
    # taps further than T - 1 from the centre never meet a sample, so clipping them is exact
    h = lowpass_kernel(cutoff, zeros, max_half=max(x.shape[-1] - 1, 1))
    return fftconvolve(x, h.reshape((1,) * (x.ndim - 1) + (-1,)), mode="same", axes=-1)


def bandstop(x: np.ndarray, f0: float, f1: float, sample_rate: int, zeros: int = 16) -> np.ndarray:
    """Remove ``[f0, f1]`` Hz as ``lowpass(f0) + x - lowpass(f1)``."""
    lo = lowpass(x, f0 / sample_rate, zeros)
    hi = x - lowpass(x, f1 / sample_rate, zeros)
    return lo + hi


def sample_band(width: float, sample_rate: int, rng: np.random.Generator) -> tuple[float, float]:
    """A band covering ``width`` of the mel axis between 0 Hz and Nyquist, uniformly placed."""
    if not 0 < width < 1:
        raise ValueError(f"width must lie in (0, 1), got {width}")
    top = float(hz_to_mel(sample_rate / 2))
    low = rng.uniform(0.0, (1.0 - width) * top)
    return float(mel_to_hz(low)), float(mel_to_hz(low + width * top))


def bandmask(batch: PairBatch, rng: np.random.Generator, width: float = 0.2,
             sample_rate: int = 16000, zeros: int = 16) -> PairBatch:
    """Band-stop both clean and noise with one random mel band per call."""
    f0, f1 = sample_band(width, sample_rate, rng)
    return PairBatch(bandstop(batch.clean, f0, f1, sample_rate, zeros),
                     bandstop(batch.noise, f0, f1, sample_rate, zeros))


@dataclass(frozen=True)
class RevechoParams:
    gain: float
    delay: float  # seconds between echoes
    rt60: float
    jitter: float = DEFAULT_JITTER

    @property
    def count(self) -> int:
        # RT60 / delay is often an integer up to rounding; don't let 1 ulp add an echo
        return max(math.ceil(self.rt60 / self.delay - 1e-9), 1)

    @property
    def decay(self) -> float:
        return ECHO_FLOOR ** (self.delay / self.rt60)

    @classmethod
    def sample(cls, rng: np.random.Generator, jitter: float = DEFAULT_JITTER) -> "RevechoParams":
        return cls(gain=rng.uniform(0.0, 0.3), delay=rng.uniform(0.010, 0.030),
                   rt60=rng.uniform(0.3, 1.3), jitter=jitter)


def echo_delays(params: RevechoParams, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Delay in samples of echoes ``1..N``: ``n * delay`` scaled by a per-echo jitter factor."""
    n = np.arange(1, params.count + 1)
    scale = rng.uniform(1 - params.jitter, 1 + params.jitter, size=n.size) if params.jitter else 1.0
    return np.round(n * params.delay * sample_rate * scale).astype(int)


def echo_train(signal: np.ndarray, params: RevechoParams, delays: np.ndarray) -> np.ndarray:
    """``sum_n decay**n * gain * signal`` delayed by ``delays[n - 1]``, cut to the input length."""
    out = np.zeros_like(signal)
    length = signal.shape[-1]
    for n, d in enumerate(delays, start=1):
        if d >= length:
            continue
        out[..., d:] += params.decay ** n * params.gain * signal[..., :length - d]
    return out


def revecho(batch: PairBatch, rng: np.random.Generator, p: float = 0.5, two_sources: bool = False,
            keep_reverb: bool = False, sample_rate: int = 16000, params: RevechoParams | None = None,
            jitter: float = DEFAULT_JITTER) -> PairBatch:
    """Add decaying echoes of clean and noise to each item with probability ``p``.

    With ``keep_reverb`` the clean echoes stay in the target; otherwise they
    are moved into the noise so the model learns to remove them. With
    ``two_sources`` clean and noise get independently jittered echo delays.
    ``params`` fixes the echo parameters instead of sampling them per item.
    """
    clean, noise = batch.clean.copy(), batch.noise.copy()
    for b in range(batch.shape[0]):
        if rng.random() >= p:
            continue
        item = params if params is not None else RevechoParams.sample(rng, jitter)
        delays = echo_delays(item, sample_rate, rng)
        echo_clean = echo_train(batch.clean[b], item, delays)
        if two_sources:
            delays = echo_delays(item, sample_rate, rng)
        noise[b] += echo_train(batch.noise[b], item, delays)
        if keep_reverb:
            clean[b] += echo_clean
        else:
            noise[b] += echo_clean
    return PairBatch(clean, noise)


def augment(batch: PairBatch, rng: np.random.Generator, *, max_shift: int = 0, remix_noise: bool = False,
            band_width: float | None = None, echo_p: float = 0.0, sample_rate: int = 16000) -> PairBatch:
    """Apply the enabled augmentations in the order shift, remix, bandmask, revecho."""
    batch = shift(batch, max_shift, rng)
    if remix_noise:
        batch = remix(batch, rng)
    if band_width:
        batch = bandmask(batch, rng, band_width, sample_rate)
    if echo_p > 0:
        batch = revecho(batch, rng, p=echo_p, sample_rate=sample_rate)
    return batch
