import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtdenoise.model import (DemucsConfig, check_params, drywet, forward, frame_length, init_params,
                             normalization_scale, param_shapes, valid_length)
from rtdenoise.tensor import ShapeError

SMALL = DemucsConfig(depth=3, hidden=4)


def test_reference_config_geometry():
    cfg = DemucsConfig()
    assert cfg.total_stride == 256
    assert frame_length(cfg) == 597
    assert cfg.lstm_hidden == 768


def test_channel_progression():
    cfg = DemucsConfig()
    assert [cfg.encoder_channels(i) for i in range(5)] == [(1, 48), (48, 96), (96, 192), (192, 384),
                                                          (384, 768)]
    assert cfg.decoder_channels(0) == (48, 1)


def test_config_validation():
    with pytest.raises(ValueError, match="resample"):
        DemucsConfig(resample=3)
    with pytest.raises(ValueError, match="divisible"):
        DemucsConfig(depth=1, stride=2, resample=4)
    with pytest.raises(ValueError):
        DemucsConfig(hidden=0)


def test_parameter_shapes_causal_and_bidirectional():
    shapes = param_shapes(DemucsConfig(depth=2, hidden=4))
    assert shapes["encoder.0.conv.weight"] == (4, 1, 8)
    assert shapes["encoder.1.rewrite.weight"] == (16, 8, 1)
    assert shapes["lstm.0.w_ih"] == (32, 8)
    assert shapes["decoder.1.conv_tr.weight"] == (8, 4, 8)
    assert shapes["decoder.0.conv_tr.weight"] == (4, 1, 8)
    assert "lstm.merge.weight" not in shapes
    bi = param_shapes(DemucsConfig(depth=2, hidden=4, causal=False))
    assert bi["lstm.1.w_ih"] == (32, 16)
    assert bi["lstm.1.r_w_hh"] == (32, 8)
    assert bi["lstm.merge.weight"] == (8, 16)


def test_init_is_seeded_float32_exact_with_zero_bias():
    a, b = init_params(SMALL, 7), init_params(SMALL, 7)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
        np.testing.assert_array_equal(a[name].astype(np.float32).astype(np.float64), a[name])
        if name.endswith("bias"):
            assert not a[name].any()
    assert not np.array_equal(a["encoder.0.conv.weight"], init_params(SMALL, 8)["encoder.0.conv.weight"])


def test_init_variance_follows_uniform_bound():
    # U(-a, a) has variance a^2 / 3; with a = sqrt(6 / fan_in) that is 2 / fan_in
    cfg = DemucsConfig(depth=2, hidden=64)
    w = init_params(cfg, 0)["encoder.1.conv.weight"]
    fan_in = w.shape[1] * w.shape[2]
    bound = math.sqrt(6 / fan_in)
    assert np.abs(w).max() <= bound
    assert abs(w.var() / (bound ** 2 / 3) - 1) < 0.05


def test_check_params_names_the_tensor():
    params = init_params(SMALL, 0)
    params["decoder.1.rewrite.weight"] = np.zeros((3, 3, 1))
    with pytest.raises(ShapeError, match="decoder.1.rewrite.weight"):
        check_params(params, SMALL)
    del params["decoder.1.rewrite.weight"]
    with pytest.raises(ShapeError, match="missing"):
        check_params(params, SMALL)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5000), st.sampled_from([(5, 8, 4, 4), (3, 8, 4, 2), (2, 8, 4, 1), (4, 6, 2, 2)]))
def test_valid_length_properties(n, dims):
    depth, kernel, stride, resample = dims
    cfg = DemucsConfig(depth=depth, kernel=kernel, stride=stride, resample=resample, hidden=2)
    v = valid_length(cfg, n)
    assert v >= n
    assert valid_length(cfg, v) == v
    # the encoder divides the upsampled valid length with no remainder at every layer
    m = v * resample
    for _ in range(depth):
        assert (m - kernel) % stride == 0
        m = (m - kernel) // stride + 1


def test_forward_keeps_length_and_is_deterministic():
    params = init_params(SMALL, 1)
    x = np.random.default_rng(0).standard_normal((2, 1, 777))
    y = forward(params, SMALL, x)
    assert y.shape == x.shape
    np.testing.assert_array_equal(y, forward(params, SMALL, x))


def test_zero_weights_give_silence():
    params = {k: np.zeros_like(v) for k, v in init_params(SMALL, 0).items()}
    x = np.random.default_rng(1).standard_normal((1, 1, 500))
    assert not forward(params, SMALL, x).any()


def test_forward_is_batch_independent():
    params = init_params(SMALL, 2)
    x = np.random.default_rng(2).standard_normal((3, 1, 600))
    full = forward(params, SMALL, x)
    for b in range(3):
        np.testing.assert_allclose(forward(params, SMALL, x[b:b + 1]), full[b:b + 1], atol=1e-12)


def test_causal_output_ignores_the_future_beyond_lookahead():
    cfg = DemucsConfig(depth=3, hidden=4, resample=4)
    params = init_params(cfg, 3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 1, 2000))
    scale = np.ones((1, 1, 1))
    t0 = 1200
    y = x.copy()
    y[..., t0:] = rng.standard_normal(800)
    a, b = forward(params, cfg, x, scale=scale), forward(params, cfg, y, scale=scale)
    # an output sample waits for the rest of its model frame plus the resampler holdback
    reach = frame_length(cfg) + math.ceil(2 * 23.25)
    np.testing.assert_array_equal(a[..., :t0 - reach], b[..., :t0 - reach])
    assert not np.allclose(a[..., t0:], b[..., t0:])
    assert not np.array_equal(a[..., :t0], b[..., :t0])  # the conv stack does look ahead


def test_noncausal_output_sees_the_future():
    cfg = DemucsConfig(depth=2, hidden=4, resample=1, causal=False)
    params = init_params(cfg, 4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 1, 1000))
    y = x.copy()
    y[..., 900:] += 1.0
    scale = np.ones((1, 1, 1))
    a, b = forward(params, cfg, x, scale=scale), forward(params, cfg, y, scale=scale)
    assert not np.array_equal(a[..., :100], b[..., :100])


def test_normalization_scale():
    x = np.random.default_rng(5).standard_normal((2, 1, 100)) * 3
    np.testing.assert_allclose(normalization_scale(SMALL, x)[:, 0, 0], 1e-3 + x.std(axis=-1)[:, 0])
    assert np.all(normalization_scale(DemucsConfig(normalize=False), x) == 1)


def test_forward_shape_errors():
    params = init_params(SMALL, 0)
    with pytest.raises(ShapeError, match="mono"):
        forward(params, SMALL, np.zeros((1, 2, 100)))
    with pytest.raises(ShapeError, match="scale"):
        forward(params, SMALL, np.zeros((1, 1, 100)), scale=np.ones((1, 1, 7)))


def test_drywet():
    x = np.array([1.0, 2.0])
    y = np.array([3.0, 5.0])
    np.testing.assert_array_equal(drywet(x, y, 0.0), y)
    np.testing.assert_array_equal(drywet(x, y, 1.0), x)
    np.testing.assert_allclose(drywet(x, y, 0.05), 0.05 * x + 0.95 * y)
    with pytest.raises(ValueError):
        drywet(x, y, 1.5)
    with pytest.raises(ShapeError):
        drywet(x, y[:1], 0.5)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 100.0))
def test_normalized_model_is_scale_equivariant(alpha):
    # the std floor is the only thing that breaks equivariance, so make it negligible
    cfg = DemucsConfig(depth=3, hidden=4, floor=1e-12)
    params = init_params(cfg, 6)
    x = np.random.default_rng(6).standard_normal((1, 1, 500))
    y = forward(params, cfg, x)
    np.testing.assert_allclose(forward(params, cfg, alpha * x), alpha * y, rtol=1e-6, atol=1e-9 * alpha)


@pytest.mark.parametrize("hidden", [48, 64])
def test_reference_sizes_build_and_run(hidden):
    cfg = DemucsConfig(hidden=hidden)
    assert [cfg.encoder_channels(i)[1] for i in range(5)] == [hidden * 2 ** i for i in range(5)]
    assert cfg.lstm_hidden == 16 * hidden
    x = np.random.default_rng(0).standard_normal((1, 1, frame_length(cfg)))
    y = forward(init_params(cfg, 0), cfg, x)
    assert y.shape == x.shape and np.all(np.isfinite(y))
