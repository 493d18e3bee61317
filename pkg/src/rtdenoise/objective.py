"""Waveform L1 plus multi-resolution STFT loss, with its gradient.

All functions take signals shaped ``[..., T]``; leading axes are treated as a
batch. Norms in the spectral-convergence term run over the whole batch, the
L1 and log-magnitude terms are averaged over batch items.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAG_FLOOR = 1e-7
DEFAULT_BETA = 0.5


@dataclass(frozen=True)
class StftConfig:
    n_fft: int
    hop: int
    win_length: int

    def __post_init__(self):
        if not 0 < self.hop <= self.win_length <= self.n_fft:
            raise ValueError(f"need 0 < hop <= win_length <= n_fft, got {self}")


DEFAULT_RESOLUTIONS = (
    StftConfig(512, 50, 240),
    StftConfig(1024, 120, 600),
    StftConfig(2048, 240, 1200),
)


@dataclass
class LossReport:
    l1: float
    sc: list = field(default_factory=list)
    mag: list = field(default_factory=list)
    beta: float = DEFAULT_BETA
    resolutions: tuple = DEFAULT_RESOLUTIONS

    @property
    def total(self) -> float:
        return self.l1 + self.beta * (sum(self.sc) + sum(self.mag))

    def to_dict(self) -> dict:
        return {
            "v": 1,
            "l1": self.l1,
            "stft": [{"n_fft": r.n_fft, "hop": r.hop, "win_length": r.win_length, "sc": s, "mag": m}
                     for r, s, m in zip(self.resolutions, self.sc, self.mag)],
            "beta": self.beta,
            "total": self.total,
        }


@lru_cache(maxsize=None)
def _layout(length: int, cfg: StftConfig):
    """Gather indices mapping each (frame, tap) to a signal sample, plus the window."""
    pad = cfg.n_fft // 2
    reflected = np.pad(np.arange(length), pad, mode="reflect")
    n_frames = 1 + (len(reflected) - cfg.n_fft) // cfg.hop
    starts = np.arange(n_frames) * cfg.hop
    index = reflected[starts[:, None] + np.arange(cfg.n_fft)]
    n = np.arange(cfg.win_length)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.win_length)  # periodic Hann
    window = np.zeros(cfg.n_fft)
    left = (cfg.n_fft - cfg.win_length) // 2
    window[left:left + cfg.win_length] = hann
    index.setflags(write=False)
    window.setflags(write=False)
    return index, window


def stft_window(cfg: StftConfig) -> np.ndarray:
    """The analysis window, zero-padded and centred in ``n_fft`` taps."""
    return _layout(cfg.win_length, cfg)[1]


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, x.shape[-1])


def stft(x, cfg: StftConfig) -> np.ndarray:
    """Complex STFT ``[..., frames, n_fft // 2 + 1]`` with centred reflect-padded framing."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < cfg.win_length:
        raise ValueError(f"signal too short for STFT: {x.shape[-1]} < win_length {cfg.win_length}")
    index, window = _layout(x.shape[-1], cfg)
    return np.fft.rfft(x[..., index] * window, axis=-1)


def stft_mag(x, cfg: StftConfig) -> np.ndarray:
    return np.abs(stft(x, cfg))


def _stft_mag_vjp(spec: np.ndarray, mag: np.ndarray, grad_mag: np.ndarray, length: int,
                  cfg: StftConfig) -> np.ndarray:
    """Pull ``d loss / d |STFT|`` back to the signal (rows of a 2-D batch)."""
    index, window = _layout(length, cfg)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(mag > 0, grad_mag * spec / mag, 0.0)
    # interior bins appear twice in the full spectrum
    z[..., 1:cfg.n_fft // 2 + (cfg.n_fft % 2)] *= 0.5
    g_frames = cfg.n_fft * np.fft.irfft(z, n=cfg.n_fft, axis=-1) * window
    out = np.empty((g_frames.shape[0], length))
    flat = index.ravel()
    for b in range(g_frames.shape[0]):
        out[b] = np.bincount(flat, weights=g_frames[b].ravel(), minlength=length)
    return out


def _ref_norm(mag_y: np.ndarray) -> float:
    norm = np.linalg.norm(mag_y)
    if norm == 0:
        raise ValueError("reference has zero spectral energy")
    return norm


def loss_sc(y, y_hat, cfg: StftConfig) -> float:
    """Spectral convergence ``||M_y - M_hat||_F / ||M_y||_F`` (normalized by the reference only)."""
    mag_y, mag_h = stft_mag(_batch(y), cfg), stft_mag(_batch(y_hat), cfg)
    return float(np.linalg.norm(mag_y - mag_h) / _ref_norm(mag_y))


def loss_mag(y, y_hat, cfg: StftConfig) -> float:
    """``(1 / T) * ||log M_y - log M_hat||_1`` averaged over batch items, magnitudes floored."""
    y, y_hat = _batch(y), _batch(y_hat)
    log_y = np.log(np.maximum(stft_mag(y, cfg), MAG_FLOOR))
    log_h = np.log(np.maximum(stft_mag(y_hat, cfg), MAG_FLOOR))
    return float(np.abs(log_y - log_h).sum() / y.size)


def _check_pair(y, y_hat):
    y, y_hat = _batch(y), _batch(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"signal shapes differ: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def total_loss(y, y_hat, beta: float = DEFAULT_BETA,
               resolutions=DEFAULT_RESOLUTIONS) -> LossReport:
    return loss_and_grad(y, y_hat, beta, resolutions, need_grad=False)[0]


def loss_and_grad(y, y_hat, beta: float = DEFAULT_BETA, resolutions=DEFAULT_RESOLUTIONS,
                  need_grad: bool = True):
    """Loss report and ``d total / d y_hat`` (shaped like ``y_hat``, or None).

    The L1 subgradient uses ``sign(0) = 0``; floored magnitudes and zero-magnitude
    bins contribute no gradient. With ``beta == 0`` the spectral terms are not
    computed at all, so a silent reference is allowed.
    """
    shape = np.shape(y_hat)
    y, y_hat = _check_pair(y, y_hat)
    n = y.size
    diff = y_hat - y
    report = LossReport(l1=float(np.abs(diff).sum() / n), beta=beta, resolutions=tuple(resolutions))
    grad = np.sign(diff) / n if need_grad else None
    if beta == 0:
        report.resolutions = ()
        return report, (grad.reshape(shape) if need_grad else None)
    for cfg in resolutions:
        spec_y, spec_h = stft(y, cfg), stft(y_hat, cfg)
        mag_y, mag_h = np.abs(spec_y), np.abs(spec_h)
        ref = _ref_norm(mag_y)
        dist = np.linalg.norm(mag_h - mag_y)
        log_y = np.log(np.maximum(mag_y, MAG_FLOOR))
        log_h = np.log(np.maximum(mag_h, MAG_FLOOR))
        report.sc.append(float(dist / ref))
        report.mag.append(float(np.abs(log_h - log_y).sum() / n))
        if need_grad:
            g_mag = (mag_h - mag_y) / (dist * ref) if dist > 0 else np.zeros_like(mag_h)
            with np.errstate(divide="ignore", invalid="ignore"):
                g_mag = g_mag + np.where(mag_h > MAG_FLOOR, np.sign(log_h - log_y) / (n * mag_h), 0.0)
            grad += beta * _stft_mag_vjp(spec_h, mag_h, g_mag, y.shape[-1], cfg)
    return report, (grad.reshape(shape) if need_grad else None)
