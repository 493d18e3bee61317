"""Toy-scale training: loss gradients, finite-difference checks, Adam, overfitting one pair."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import augment
from .autodiff import model_backward
from .model import DemucsConfig, ModelParams, forward
from .objective import (DEFAULT_BETA, DEFAULT_RESOLUTIONS, MAG_FLOOR, LossReport, loss_and_grad,
                        stft_mag)

GRAD_TOLERANCE = 1e-3


class DivergenceError(FloatingPointError):
    """Training loss went non-finite or blew past the divergence threshold."""

    def __init__(self, message: str, curve: list[float]):
        super().__init__(message)
        self.curve = curve


def _as_pair(batch):
    if isinstance(batch, augment.PairBatch):
        return batch.noisy, batch.clean
    noisy, clean = batch
    return np.asarray(noisy, dtype=np.float64), np.asarray(clean, dtype=np.float64)


def loss(params: ModelParams, config: DemucsConfig, batch, beta: float = DEFAULT_BETA,
         resolutions=DEFAULT_RESOLUTIONS) -> LossReport:
    """Loss of the model on ``batch``, a :class:`PairBatch` or a ``(noisy, clean)`` tuple."""
    noisy, clean = _as_pair(batch)
    return loss_and_grad(clean, forward(params, config, noisy), beta, resolutions, need_grad=False)[0]


def backward(params: ModelParams, config: DemucsConfig, batch, beta: float = DEFAULT_BETA,
             resolutions=DEFAULT_RESOLUTIONS) -> tuple[LossReport, dict]:
    """Loss report and the gradient of its total w.r.t. every parameter."""
    noisy, clean = _as_pair(batch)
    tape = {}
    y_hat = forward(params, config, noisy, tape=tape)
    report, g = loss_and_grad(clean, y_hat, beta, resolutions)
    if not np.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss {report.total}")
    return report, model_backward(params, config, tape, g)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict, state: AdamState) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update; returns new parameter and state objects."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    step = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1 - state.beta1 ** step
    c2 = 1 - state.beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, step, m_new, v_new)


@dataclass
class GradReport:
    errors: dict  # tensor name -> relative error over the checked entries
    checked: dict  # tensor name -> number of entries compared
    tolerance: float = GRAD_TOLERANCE
    skipped: dict = field(default_factory=dict)  # probes dropped for straddling a kink

    @property
    def passed(self) -> bool:
        return all(self.checked.values()) and all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance, "errors": self.errors,
                "checked": self.checked, "skipped": self.skipped}


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def nudge_target(params, config, noisy, clean, gap: float = 1e-4):
    """Move target samples that sit within ``gap`` of the prediction, away from the L1 kink."""
    y_hat = forward(params, config, noisy)
    diff = y_hat - clean
    close = np.abs(diff) < gap
    return np.where(close, clean - np.where(diff >= 0, gap, -gap), clean)


def kink_signature(params, config, noisy, clean, resolutions=DEFAULT_RESOLUTIONS) -> bytes:
    """Packed signs of every non-smooth point of the loss: ReLU inputs, L1 residuals,
    log-magnitude residuals and magnitude-floor hits.

    Between two parameter values with equal signatures the loss is smooth.
    """
    tape = {}
    y_hat = forward(params, config, noisy, tape=tape)
    bits = [e["h"] > 0 for e in tape["encoder"]]
    bits += [e["o"] > 0 for e in tape["decoder"]]
    bits.append(y_hat > clean)
    for cfg in resolutions:
        m_h, m_y = stft_mag(y_hat, cfg), stft_mag(clean, cfg)
        bits += [m_h > m_y, m_h > MAG_FLOOR]
    return np.packbits(np.concatenate([b.ravel() for b in bits])).tobytes()


def gradcheck(params: ModelParams, config: DemucsConfig, batch, beta: float = DEFAULT_BETA,
              resolutions=DEFAULT_RESOLUTIONS, h: float = 1e-5, per_tensor: int | None = 6,
              seed: int = 0, tolerance: float = GRAD_TOLERANCE, retargets: int = 4) -> GradReport:
    """Compare analytic gradients with central differences.

    ``per_tensor`` entries are drawn at random from each tensor (all entries
    when None). A central difference whose +-h interval crosses a kink of the
    loss does not estimate the derivative, so such a probe is retried against
    up to ``retargets`` slightly perturbed copies of the target (which moves
    the L1 and log-magnitude ties) and otherwise skipped in favour of another
    entry. The error per tensor is the max abs difference over the checked
    entries, relative to the largest gradient magnitude among them.
    """
    noisy, clean = _as_pair(batch)
    rng = np.random.default_rng(seed)
    targets = [nudge_target(params, config, noisy, clean)]
    for _ in range(retargets):
        jitter = 1e-4 * clean.std() * rng.standard_normal(clean.shape)
        targets.append(nudge_target(params, config, noisy, clean + jitter))
    points = {}

    def point(t):
        # analytic gradient and kink signature at target t, built on first use
        if t not in points:
            _, grads = backward(params, config, (noisy, targets[t]), beta, resolutions)
            points[t] = grads, kink_signature(params, config, noisy, targets[t], resolutions)
        return points[t]

    def central(name, flat, t):
        base = point(t)[1]
        probe = dict(params)
        values = []
        for sign in (1, -1):
            w = params[name].copy()
            w.flat[flat] += sign * h
            probe[name] = w
            if kink_signature(probe, config, noisy, targets[t], resolutions) != base:
                return None
            values.append(loss(probe, config, (noisy, targets[t]), beta, resolutions).total)
        return (values[0] - values[1]) / (2 * h)

    errors, checked, skipped = {}, {}, {}
    for name, p in params.items():
        want = p.size if per_tensor is None else min(per_tensor, p.size)
        analytic, numeric = [], []
        skipped[name] = 0
        for flat in rng.permutation(p.size):
            if len(numeric) == want:
                break
            for t in range(len(targets)):
                value = central(name, flat, t)
                if value is not None:
                    analytic.append(point(t)[0][name].flat[flat])
                    numeric.append(value)
                    break
            else:
                skipped[name] += 1
        errors[name] = _relative_error(np.array(analytic), np.array(numeric)) if numeric else 0.0
        checked[name] = len(numeric)
    return GradReport(errors, checked, tolerance, skipped)


def overfit(params: ModelParams, config: DemucsConfig, clean, noise, steps: int, seed: int = 0,
            lr: float = 3e-4, max_shift: int = 0, beta: float = DEFAULT_BETA,
            resolutions=DEFAULT_RESOLUTIONS, diverge_factor: float = 10.0,
            on_step=None) -> tuple[list[float], ModelParams]:
    """Train on a single (clean, noise) pair with random-shift augmentation.

    Returns ``(curve, params)`` where ``curve[k]`` is the loss seen at step
    ``k``, evaluated before the ``k``-th update; ``curve`` has ``steps + 1``
    entries, the last one measured after the final update.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    pair = augment.PairBatch(np.reshape(clean, (1, 1, -1)), np.reshape(noise, (1, 1, -1)))
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    curve: list[float] = []
    for k in range(steps + 1):
        batch = augment.shift(pair, max_shift, rng)
        if k < steps:
            report, grads = _checked_backward(params, config, batch, beta, resolutions, curve)
        else:
            report = loss(params, config, batch, beta, resolutions)
        total = report.total
        curve.append(total)
        if not np.isfinite(total) or total > diverge_factor * curve[0]:
            raise DivergenceError(f"loss diverged at step {k}: {total:.4g} (initial {curve[0]:.4g})", curve)
        if on_step is not None:
            on_step(k, report)
        if k < steps:
            params, state = adam_step(params, grads, state)
    return curve, params


def _checked_backward(params, config, batch, beta, resolutions, curve):
    try:
        return backward(params, config, batch, beta, resolutions)
    except FloatingPointError as exc:
        raise DivergenceError(str(exc), curve) from exc
