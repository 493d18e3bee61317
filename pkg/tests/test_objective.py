import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtdenoise.objective import (DEFAULT_RESOLUTIONS, MAG_FLOOR, StftConfig, loss_and_grad, loss_mag,
                                 loss_sc, stft, stft_mag, stft_window, total_loss)

SMALL = (StftConfig(64, 16, 48), StftConfig(128, 32, 96))


def test_stft_matches_direct_dft():
    cfg = StftConfig(32, 8, 24)
    x = np.random.default_rng(0).standard_normal(100)
    spec = stft(x, cfg)
    padded = np.pad(x, 16, mode="reflect")
    n = np.arange(32)
    hann = np.zeros(32)
    hann[4:28] = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(24) / 24)
    for frame in (0, 3, spec.shape[0] - 1):
        seg = padded[frame * 8:frame * 8 + 32] * hann
        for k in (0, 5, 16):
            direct = np.sum(seg * np.exp(-2j * np.pi * k * n / 32))
            assert abs(spec[frame, k] - direct) < 1e-12
    assert spec.shape == (1 + 100 // 8, 17)
    np.testing.assert_array_equal(stft_window(cfg), hann)


def test_stft_rejects_short_signal():
    with pytest.raises(ValueError, match="too short"):
        stft(np.zeros(200), StftConfig(512, 50, 240))
    with pytest.raises(ValueError):
        StftConfig(64, 80, 48)


def test_identical_signals_cost_nothing():
    y = np.random.default_rng(1).standard_normal((2, 1, 1500))
    report = total_loss(y, y)
    assert report.l1 == 0 and report.sc == [0, 0, 0] and report.mag == [0, 0, 0]
    assert report.total == 0


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 3.0), st.integers(0, 2**31 - 1))
def test_scaled_estimate_closed_forms(alpha, seed):
    y = np.random.default_rng(seed).standard_normal((2, 400))
    for cfg in SMALL:
        assert loss_sc(y, alpha * y, cfg) == pytest.approx(abs(1 - alpha), rel=1e-9, abs=1e-12)
        mag = stft_mag(y, cfg)
        above = np.count_nonzero(mag > MAG_FLOOR)
        assert above == mag.size
        expected = abs(np.log(alpha)) * mag.size / y.size
        assert loss_mag(y, alpha * y, cfg) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_total_combines_terms_with_beta():
    rng = np.random.default_rng(2)
    y, y_hat = rng.standard_normal(1300), rng.standard_normal(1300)
    report = total_loss(y, y_hat, beta=0.25)
    assert report.l1 == pytest.approx(np.abs(y - y_hat).mean())
    assert report.total == pytest.approx(report.l1 + 0.25 * (sum(report.sc) + sum(report.mag)))
    for cfg, sc, mag in zip(DEFAULT_RESOLUTIONS, report.sc, report.mag):
        assert sc == pytest.approx(loss_sc(y, y_hat, cfg))
        assert mag == pytest.approx(loss_mag(y, y_hat, cfg))
    data = json.loads(json.dumps(report.to_dict()))
    assert data["v"] == 1 and len(data["stft"]) == 3 and data["stft"][2]["n_fft"] == 2048


def test_errors():
    with pytest.raises(ValueError, match="zero spectral energy"):
        total_loss(np.zeros(1300), np.ones(1300))
    with pytest.raises(ValueError, match="shapes differ"):
        total_loss(np.ones(1300), np.ones(1301))


def test_floor_keeps_silence_finite():
    y = np.random.default_rng(3).standard_normal(1300)
    report = total_loss(y, np.zeros(1300))
    assert np.isfinite(report.total)
    assert report.sc == pytest.approx([1.0, 1.0, 1.0])


@pytest.mark.parametrize("beta", [0.0, 0.5])
def test_gradient_matches_central_differences(beta):
    rng = np.random.default_rng(4)
    y = rng.standard_normal((2, 300))
    y_hat = y + 0.3 * rng.standard_normal((2, 300))
    _, grad = loss_and_grad(y, y_hat, beta, SMALL)
    h = 1e-6
    for idx in [(0, 0), (0, 17), (1, 150), (1, 299)]:
        step = np.zeros_like(y_hat)
        step[idx] = h
        up = total_loss(y, y_hat + step, beta, SMALL).total
        down = total_loss(y, y_hat - step, beta, SMALL).total
        assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


def test_directional_derivative_of_spectral_terms():
    # the L1 term is piecewise linear; a random direction checks the smooth spectral part
    rng = np.random.default_rng(5)
    y = rng.standard_normal(1300)
    y_hat = y + 0.5 * rng.standard_normal(1300)
    _, grad = loss_and_grad(y, y_hat)
    d = rng.standard_normal(1300)
    h = 1e-6
    numeric = (total_loss(y, y_hat + h * d).total - total_loss(y, y_hat - h * d).total) / (2 * h)
    assert np.dot(grad, d) == pytest.approx(numeric, rel=1e-5)


def test_grad_shape_follows_input():
    y = np.random.default_rng(6).standard_normal((2, 1, 300))
    _, grad = loss_and_grad(y, 0.5 * y, 0.5, SMALL)
    assert grad.shape == y.shape
    assert loss_and_grad(y, y, 0.5, SMALL, need_grad=False)[1] is None


def test_dc_signal_lands_in_bin_zero():
    cfg = StftConfig(64, 16, 48)
    mag = stft_mag(np.ones(400), cfg)
    np.testing.assert_allclose(mag[:, 0], stft_window(cfg).sum(), rtol=1e-12)
    # the window's main lobe spills into bin 1; bin 0 still dominates every frame
    assert np.all(np.argmax(mag, axis=1) == 0)


def test_parseval_per_frame():
    cfg = StftConfig(128, 32, 96)
    x = np.random.default_rng(7).standard_normal(1000)
    spec = stft(x, cfg)
    full = np.concatenate([spec, np.conj(spec[:, -2:0:-1])], axis=1)
    energy = np.sum(np.abs(full) ** 2, axis=1) / cfg.n_fft
    index = np.pad(np.arange(1000), 64, mode="reflect")
    frames = np.stack([x[index[f * 32:f * 32 + 128]] * stft_window(cfg) for f in range(spec.shape[0])])
    np.testing.assert_allclose(energy, np.sum(frames ** 2, axis=1), rtol=1e-10)


def test_spectral_convergence_normalises_by_the_reference_only():
    y = np.random.default_rng(8).standard_normal(400)
    cfg = SMALL[0]
    assert loss_sc(y, 2 * y, cfg) == pytest.approx(1.0)
    assert loss_sc(2 * y, y, cfg) == pytest.approx(0.5)
