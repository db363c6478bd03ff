"""Verification harness: central-difference gradient checks for every layer
and every composite loss used in training.  Shapes are kept small so the
full suite runs in seconds."""

from __future__ import annotations

import numpy as np

from .numerics import (ParamSet, RngStream, conv2d_batch,
                       conv2d_batch_backward, dense_backward, dense_forward,
                       grad_check, lstm_step, lstm_step_backward, relu,
                       softmax_xent)

STEP = 1e-5
TOL_COMPOSITE = 1e-6
TOL_SIMPLE = 1e-8


def check_dense(seed: int) -> float:
    rng = RngStream(seed, ("gc", "dense"))
    x = rng.normal((4, 6))
    target = rng.normal((4, 3))
    params = ParamSet()
    params.add("w", rng.normal((6, 3)))
    params.add("b", rng.normal(3))

    def fn(p):
        y, cache = dense_forward(x, p["w"].value, p["b"].value)
        d = y - target
        _, dw, db = dense_backward(d / d.size * 2, cache)
        p["w"].grad += dw
        p["b"].grad += db
        return float((d * d).mean())

    return grad_check(fn, params, STEP)


def check_conv(seed: int, padding: str) -> float:
    rng = RngStream(seed, ("gc", "conv", padding))
    x = rng.normal((2, 6, 6, 2))
    target_shape = (2, 6, 6, 3) if padding == "same" else (2, 4, 4, 3)
    target = rng.normal(target_shape)
    params = ParamSet()
    params.add("k", rng.normal((3, 3, 2, 3)) * 0.5)

    def fn(p):
        y, cache = conv2d_batch(x, p["k"].value, padding=padding)
        d = y - target
        _, dk = conv2d_batch_backward(d / d.size * 2, cache)
        p["k"].grad += dk
        return float((d * d).mean())

    return grad_check(fn, params, STEP)


def check_conv_strided(seed: int) -> float:
    rng = RngStream(seed, ("gc", "conv-stride"))
    x = rng.normal((2, 8, 8, 1))
    target = rng.normal((2, 4, 4, 2))
    params = ParamSet()
    params.add("k", rng.normal((3, 3, 1, 2)) * 0.5)

    def fn(p):
        y, cache = conv2d_batch(x, p["k"].value, padding="same", stride=2)
        d = y - target
        _, dk = conv2d_batch_backward(d / d.size * 2, cache)
        p["k"].grad += dk
        return float((d * d).mean())

    return grad_check(fn, params, STEP)


def check_lstm(seed: int, hidden: int = 5, dim: int = 4) -> float:
    rng = RngStream(seed, ("gc", "lstm"))
    x = rng.normal((3, dim))
    h0 = rng.normal((3, hidden))
    c0 = rng.normal((3, hidden))
    target = rng.normal((3, hidden))
    params = ParamSet()
    params.add("wx", rng.normal((dim, 4 * hidden)) * 0.5)
    params.add("wh", rng.normal((hidden, 4 * hidden)) * 0.5)
    params.add("b", rng.normal(4 * hidden) * 0.5)

    def fn(p):
        h, c, cache = lstm_step(x, h0, c0, p["wx"].value, p["wh"].value,
                                p["b"].value)
        d = h - target
        _, _, _, dwx, dwh, db = lstm_step_backward(d / d.size * 2,
                                                   np.zeros_like(c), cache)
        p["wx"].grad += dwx
        p["wh"].grad += dwh
        p["b"].grad += db
        return float((d * d).mean())

    return grad_check(fn, params, STEP)


def check_softmax_xent(seed: int, n: int = 7) -> float:
    rng = RngStream(seed, ("gc", "xent"))
    params = ParamSet()
    params.add("logits", rng.normal(n))

    def fn(p):
        loss, probs = softmax_xent(p["logits"].value, 2)
        g = probs.copy()
        g[2] -= 1.0
        p["logits"].grad += g
        return loss

    return grad_check(fn, params, STEP)


def check_decoder_full(seed: int) -> float:
    """Full bidirectional decoder forward + cross-entropy, small shapes."""
    from .decoder import (DecoderConfig, decoder_backward_batch,
                          decoder_forward_batch, init_decoder_params)
    rng = RngStream(seed, ("gc", "decoder"))
    config = DecoderConfig(voxels_per_node=6, hidden_per_direction=4,
                           dropout_rate=0.0)
    seq = rng.normal((5, 2, 6))
    labels = np.array([3, 7])
    params = init_decoder_params(config, rng.child("init"))
    # nonzero params give a non-trivial loss surface
    for _, p in params.items():
        p.value += rng.normal(p.value.shape) * 0.2

    def fn(p):
        probs, cache = decoder_forward_batch(p, config, seq, train_mode=False)
        decoder_backward_batch(p, config, cache, labels)
        idx = np.arange(len(labels))
        return float(-np.log(probs[idx, labels]).mean())

    return grad_check(fn, params, STEP)


def check_encoder_full(seed: int) -> float:
    """Encoder conv stages + linear map + weighted Pearson loss, 16x16."""
    from .encoder import (EncoderConfig, RoiModel, batch_pc_loss,
                          init_roi_params, roi_backward, roi_forward)
    rng = RngStream(seed, ("gc", "encoder"))
    config = EncoderConfig(channels=2, stages=2)
    res, n_vox = 16, 4
    params = init_roi_params("V1", 3, res, n_vox, 2, 2, rng.child("init"))
    # generic parameter values: zero conv biases would park ReLU kinks
    # exactly at the finite-difference evaluation point
    jitter = rng.child("jitter")
    for _, p in params.items():
        p.value += jitter.normal(p.value.shape) * 0.05
    model = RoiModel("V1", 3, params, res, n_vox)
    images = rng.normal((5, res, res)) * 0.5 + 0.5
    true = rng.normal((5, n_vox))
    weights = np.abs(rng.normal(n_vox))
    weights /= weights.sum()

    def fn(p):
        pred, cache = roi_forward(model, images, config)
        loss, dpred = batch_pc_loss(pred, true, weights)
        roi_backward(model, dpred, cache, config)
        return loss

    # fc.b has an exactly-zero gradient under the correlation loss (shift
    # invariance); finite differences only see rounding noise there, so it
    # is asserted exactly in the unit tests instead of checked here.
    checked = ParamSet()
    checked._entries = {k: v for k, v in params.items() if k != "fc.b"}
    return grad_check(fn, checked, STEP)


def check_pc_loss(seed: int) -> float:
    from .encoder import batch_pc_loss
    rng = RngStream(seed, ("gc", "pcloss"))
    true = rng.normal((6, 3))
    weights = np.array([0.5, 0.3, 0.2])
    params = ParamSet()
    params.add("pred", rng.normal((6, 3)))

    def fn(p):
        loss, dpred = batch_pc_loss(p["pred"].value, true, weights)
        p["pred"].grad += dpred
        return loss

    return grad_check(fn, params, STEP)


def run_gradient_suite(seed: int = 0):
    """Run every check; returns (name, max_rel_err, tolerance) triples."""
    return [
        ("dense + squared loss", check_dense(seed), TOL_SIMPLE),
        ("conv2d same", check_conv(seed, "same"), TOL_COMPOSITE),
        ("conv2d valid", check_conv(seed, "valid"), TOL_COMPOSITE),
        ("conv2d stride 2", check_conv_strided(seed), TOL_COMPOSITE),
        ("lstm step", check_lstm(seed), TOL_COMPOSITE),
        ("softmax cross-entropy", check_softmax_xent(seed), TOL_COMPOSITE),
        ("weighted PC loss", check_pc_loss(seed), TOL_COMPOSITE),
        ("decoder forward + xent", check_decoder_full(seed), TOL_COMPOSITE),
        ("encoder forward + PC loss", check_encoder_full(seed), TOL_COMPOSITE),
    ]
