import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtdenoise import train
from rtdenoise.augment import PairBatch
from rtdenoise.model import DemucsConfig, init_params
from rtdenoise.objective import StftConfig

TOY = DemucsConfig(depth=2, hidden=4, resample=1)
SHORT = (StftConfig(64, 16, 48), StftConfig(128, 32, 96))


def toy_pair(seed=0, length=600):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal((1, 1, length)) * 0.3
    return PairBatch(clean, 0.1 * rng.standard_normal((1, 1, length)))


def test_loss_accepts_tuple_or_pair():
    params = init_params(TOY, 0)
    batch = toy_pair()
    a = train.loss(params, TOY, batch, resolutions=SHORT)
    b = train.loss(params, TOY, (batch.noisy, batch.clean), resolutions=SHORT)
    assert a.total == b.total


def test_backward_gradient_names_and_shapes():
    params = init_params(TOY, 1)
    report, grads = train.backward(params, TOY, toy_pair(1), resolutions=SHORT)
    assert np.isfinite(report.total)
    assert {k: v.shape for k, v in grads.items()} == {k: v.shape for k, v in params.items()}


def test_zero_model_and_silent_input_give_zero_gradients():
    params = {k: np.zeros_like(v) for k, v in init_params(TOY, 0).items()}
    batch = PairBatch(np.zeros((1, 1, 600)), np.zeros((1, 1, 600)))
    # silent target has no spectral reference, so only the waveform term is used
    _, grads = train.backward(params, TOY, batch, beta=0.0, resolutions=SHORT)
    assert all(not g.any() for g in grads.values())


def test_backward_rejects_non_finite_loss():
    params = init_params(TOY, 0)
    batch = toy_pair()
    bad = PairBatch(batch.clean, batch.noise.copy())
    bad.noise[0, 0, 5] = np.nan
    with pytest.raises(FloatingPointError):
        train.backward(params, TOY, bad, resolutions=SHORT)


def test_adam_first_step_moves_each_weight_by_lr():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 1e-3])}
    new, state = train.adam_step(params, grads, train.AdamState(lr=0.01))
    # bias correction makes the first step lr * g / (|g| + eps)
    np.testing.assert_allclose(new["w"], params["w"] - 0.01 * np.sign(grads["w"]), rtol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_leaves_params_and_counts_step():
    params = {"w": np.ones(3)}
    new, state = train.adam_step(params, {"w": np.zeros(3)}, train.AdamState())
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.step == 1


def test_adam_matches_hand_computed_second_step():
    state = train.AdamState(lr=0.1)
    p = {"w": np.array([0.0])}
    p, state = train.adam_step(p, {"w": np.array([1.0])}, state)
    p, state = train.adam_step(p, {"w": np.array([3.0])}, state)
    m = 0.9 * 0.1 + 0.1 * 3.0
    v = 0.999 * 0.001 + 0.001 * 9.0
    expected = -0.1 / (1 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p["w"][0] == pytest.approx(expected, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=6))
def test_adam_moves_against_gradient(values):
    g = np.array(values)
    new, _ = train.adam_step({"w": np.zeros_like(g)}, {"w": g}, train.AdamState())
    assert np.all(np.sign(new["w"]) == -np.sign(g))


def test_adam_validates_names_and_shapes():
    with pytest.raises(ValueError, match="names"):
        train.adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, train.AdamState())
    with pytest.raises(ValueError, match="shape"):
        train.adam_step({"a": np.zeros(1)}, {"a": np.zeros(2)}, train.AdamState())


def test_gradcheck_passes_on_toy_model():
    params = init_params(TOY, 0)
    rng = np.random.default_rng(0)
    clean = rng.standard_normal((1, 1, 1200)) * 0.3
    batch = PairBatch(clean, 0.1 * rng.standard_normal(clean.shape))
    report = train.gradcheck(params, TOY, batch, per_tensor=2, seed=0)
    assert report.passed, report.to_dict()
    assert all(n > 0 for n in report.checked.values())


def test_grad_report_fails_on_large_error_or_empty_tensor():
    assert not train.GradReport({"a": 2e-3}, {"a": 3}).passed
    assert not train.GradReport({"a": 0.0}, {"a": 0}).passed
    report = train.GradReport({"a": 1e-5, "b": 5e-4}, {"a": 2, "b": 2})
    assert report.passed and report.worst == ("b", 5e-4)


def test_kink_signature_changes_when_a_residual_flips_sign():
    params = init_params(TOY, 0)
    batch = toy_pair(3, 600)
    noisy, clean = batch.noisy, batch.clean
    base = train.kink_signature(params, TOY, noisy, clean, SHORT)
    assert train.kink_signature(params, TOY, noisy, clean, SHORT) == base
    assert train.kink_signature(params, TOY, noisy, clean + 10.0, SHORT) != base


def test_overfit_zero_steps_returns_initial_loss():
    params = init_params(TOY, 0)
    batch = toy_pair(4, 800)
    curve, out = train.overfit(params, TOY, batch.clean, batch.noise, 0, resolutions=SHORT)
    assert curve == [pytest.approx(train.loss(params, TOY, batch, resolutions=SHORT).total)]
    assert out is params


def test_overfit_is_deterministic_and_descends():
    params = init_params(TOY, 0)
    batch = toy_pair(5, 800)
    runs = [train.overfit(params, TOY, batch.clean, batch.noise, 30, seed=2, lr=3e-3, max_shift=40,
                          resolutions=SHORT)[0] for _ in range(2)]
    assert runs[0] == runs[1]
    assert len(runs[0]) == 31
    assert runs[0][-1] < runs[0][0]


def test_overfit_reports_each_step():
    params = init_params(TOY, 0)
    batch = toy_pair(6, 800)
    seen = []
    train.overfit(params, TOY, batch.clean, batch.noise, 3, resolutions=SHORT,
                  on_step=lambda k, report: seen.append(k))
    assert seen == [0, 1, 2, 3]


def test_overfit_divergence_carries_curve():
    params = init_params(TOY, 0)
    batch = toy_pair(7, 800)
    with pytest.raises(train.DivergenceError) as info:
        train.overfit(params, TOY, batch.clean, batch.noise, 20, lr=50.0, resolutions=SHORT,
                      diverge_factor=1.5)
    assert len(info.value.curve) >= 2
    with pytest.raises(ValueError):
        train.overfit(params, TOY, batch.clean, batch.noise, -1)
