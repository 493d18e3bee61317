"""Hand-written reverse-mode rules for the closed op set, and model backprop.

Each ``*_vjp`` takes the upstream gradient plus whatever the forward pass
saved and returns gradients for the op's inputs and parameters.
:func:`model_backward` replays a tape filled by ``model.forward(..., tape=...)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import resample as rs
from .model import DemucsConfig, ModelParams
from .tensor import conv1d, conv_transpose1d, sigmoid


def conv1d_vjp(g, x, weight, stride=1):
    """Returns ``(d_x, d_weight, d_bias)`` for ``conv1d(x, weight, bias, stride)``."""
    c_out, c_in, kernel = weight.shape
    batch, _, length = x.shape
    if kernel == 1 and stride == 1:
        d_w = np.einsum("bot,bct->oc", g, x)[:, :, None]
    else:
        frames = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
        cols = frames.transpose(0, 2, 1, 3).reshape(-1, c_in * kernel)
        d_w = (g.transpose(1, 0, 2).reshape(c_out, -1) @ cols).reshape(weight.shape)
    d_x = conv_transpose1d(g, weight, stride=stride)
    if d_x.shape[-1] < length:
        d_x = np.pad(d_x, ((0, 0), (0, 0), (0, length - d_x.shape[-1])))
    return d_x, d_w, g.sum(axis=(0, 2))


def conv_transpose1d_vjp(g, x, weight, stride=1):
    """Returns ``(d_x, d_weight, d_bias)`` for ``conv_transpose1d(x, weight, bias, stride)``."""
    kernel = weight.shape[2]
    windows = sliding_window_view(g, kernel, axis=2)[:, :, ::stride, :]  # [B, c_out, T, K]
    d_w = np.einsum("bct,botk->cok", x, windows, optimize=True)
    d_x = conv1d(g, weight, stride=stride)
    return d_x, d_w, g.sum(axis=(0, 2))


def relu_vjp(g, pre):
    return g * (pre > 0)


def glu_vjp(g, x, axis=1):
    value, gate = np.split(x, 2, axis=axis)
    s = sigmoid(gate)
    return np.concatenate([g * s, g * value * s * (1.0 - s)], axis=axis)


def linear_vjp(g, x, weight):
    d_w = np.einsum("bot,bct->oc", g, x)
    return np.matmul(weight.T, g), d_w, g.sum(axis=(0, 2))


def lstm_layer_vjp(g_seq, entry, w_ih, w_hh):
    """BPTT through one recorded LSTM layer (either direction).

    ``g_seq`` is ``d loss / d hs`` shaped ``[B, T, H]``; the final state is
    assumed unused by the loss.
    """
    seq = entry["x"]
    hidden = w_hh.shape[1]
    d_seq = np.zeros_like(seq)
    d_w_ih = np.zeros_like(w_ih)
    d_w_hh = np.zeros_like(w_hh)
    d_bias = np.zeros(4 * hidden)
    dh_next = np.zeros((seq.shape[0], hidden))
    dc_next = np.zeros_like(dh_next)
    for t, h_prev, c_prev, gates, c in reversed(entry["steps"]):
        i, f, gg, o = np.split(gates, 4, axis=1)
        dh = g_seq[:, t] + dh_next
        tc = np.tanh(c)
        dc = dh * o * (1.0 - tc * tc) + dc_next
        d_pre = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        dc_next = dc * f
        d_w_ih += d_pre.T @ seq[:, t]
        d_w_hh += d_pre.T @ h_prev
        d_bias += d_pre.sum(axis=0)
        d_seq[:, t] = d_pre @ w_ih
        dh_next = d_pre @ w_hh
    return d_seq, d_w_ih, d_w_hh, d_bias


def _bottleneck_vjp(g, params, config: DemucsConfig, entries, grads):
    """Gradient through ``LSTM(z) + z``; returns ``d z``."""
    hid = config.lstm_hidden
    g_seq = g.transpose(0, 2, 1)
    if config.causal:
        layers = [[e] for e in entries]
    else:
        merge_in = entries[-1]["merge_in"]
        d_in, d_w, d_b = linear_vjp(g, merge_in, params["lstm.merge.weight"])
        grads["lstm.merge.weight"] += d_w
        grads["lstm.merge.bias"] += d_b
        g_seq = d_in.transpose(0, 2, 1)
        layers = [entries[0:2], entries[2:4]]
    for group in reversed(layers):
        d_x = 0.0
        for k, entry in enumerate(group):
            p = entry["prefix"]
            part = g_seq[..., k * hid:(k + 1) * hid] if len(group) > 1 else g_seq
            d, d_ih, d_hh, d_b = lstm_layer_vjp(part, entry, params[p + "w_ih"], params[p + "w_hh"])
            grads[p + "w_ih"] += d_ih
            grads[p + "w_hh"] += d_hh
            grads[p + "bias"] += d_b
            d_x = d_x + d
        g_seq = d_x
    return g + g_seq.transpose(0, 2, 1)


def model_backward(params: ModelParams, config: DemucsConfig, tape: dict, grad_out) -> dict:
    """Parameter gradients given ``d loss / d forward(x)``.

    The normalization divisor depends only on the input, so it is a constant
    here.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    length, padded = tape["length"], tape["padded"]
    g = np.zeros((grad_out.shape[0], 1, padded))
    g[..., :length] = grad_out * tape["scale"]
    g = rs.downsample_adjoint(g, config.resample, tape["dec_length"], config.resample_zeros)

    def _fit(d, n):
        if d.shape[-1] >= n:
            return d[..., :n]
        return np.pad(d, ((0, 0), (0, 0), (0, n - d.shape[-1])))

    # decoder i consumed (previous output + skip i), both cut to a common length
    z = tape["z"]
    d_skips = {}
    for i, entry in zip(range(config.depth), reversed(tape["decoder"])):
        p = f"decoder.{i}."
        if i > 0:
            g = relu_vjp(g, entry["o"])
        g, d_w, d_b = conv_transpose1d_vjp(g, entry["g"], params[p + "conv_tr.weight"], config.stride)
        grads[p + "conv_tr.weight"] += d_w
        grads[p + "conv_tr.bias"] += d_b
        g = glu_vjp(g, entry["r"])
        g, d_w, d_b = conv1d_vjp(g, entry["x"], params[p + "rewrite.weight"])
        grads[p + "rewrite.weight"] += d_w
        grads[p + "rewrite.bias"] += d_b
        d_skips[i] = _fit(g, tape["encoder"][i]["r"].shape[-1])
        prev = tape["decoder"][config.depth - 2 - i]["o"] if i < config.depth - 1 else z
        g = _fit(g, prev.shape[-1])

    g = _bottleneck_vjp(g, params, config, tape["lstm"], grads)
    for i in reversed(range(config.depth)):
        entry = tape["encoder"][i]
        p = f"encoder.{i}."
        g = g + d_skips[i]
        g = glu_vjp(g, entry["r"])
        g, d_w, d_b = conv1d_vjp(g, entry["a"], params[p + "rewrite.weight"])
        grads[p + "rewrite.weight"] += d_w
        grads[p + "rewrite.bias"] += d_b
        g = relu_vjp(g, entry["h"])
        g, d_w, d_b = conv1d_vjp(g, entry["x"], params[p + "conv.weight"], config.stride)
        grads[p + "conv.weight"] += d_w
        grads[p + "conv.bias"] += d_b
    return grads
