"""Image-space evaluation of reconstructions: MSE, Pearson correlation,
SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, L=1), layer-wise
perceptual correlations through the trained encoder's conv features, and a
pairwise identification analysis.
"""

from __future__ import annotations

import numpy as np

from .numerics import pearson

_WIN = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_L = 1.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimension mismatch: %s vs %s" % (a.shape, b.shape))
    return a, b


def mse_img(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    d = a - b
    return float((d * d).mean())


def pcc_img(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return pearson(a.ravel(), b.ravel())


def _gaussian_window(size: int = _WIN, sigma: float = _SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Valid-region correlation of img with a separably applied 2-D window."""
    from numpy.lib.stride_tricks import sliding_window_view
    patches = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over valid window positions."""
    a, b = _check_pair(a, b)
    if min(a.shape) < _WIN:
        raise ValueError("image smaller than %dx%d SSIM window" % (_WIN, _WIN))
    w = _gaussian_window()
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    mu_aa = _filter_valid(a * a, w)
    mu_bb = _filter_valid(b * b, w)
    mu_ab = _filter_valid(a * b, w)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    c1 = (_K1 * _L) ** 2
    c2 = (_K2 * _L) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def perceptual_layer_corrs(a: np.ndarray, b: np.ndarray,
                           encoder_model) -> list[float]:
    """Pearson between flattened conv-stage feature maps of a and b,
    per stage of each ROI model in forward order (V1, V2, V3)."""
    from .encoder import encoder_features
    fa = encoder_features(encoder_model, np.asarray(a, dtype=np.float64))
    fb = encoder_features(encoder_model, np.asarray(b, dtype=np.float64))
    return [pearson(x.ravel(), y.ravel()) for x, y in zip(fa, fb)]


def identification(recons: list[np.ndarray], stimuli: list[np.ndarray]) -> float:
    """Fraction of reconstructions most SSIM-similar to their own stimulus."""
    if len(recons) != len(stimuli):
        raise ValueError("identification: list length mismatch")
    n = len(recons)
    if n < 2:
        raise ValueError("identification: need at least 2 pairs")
    sims = np.array([[ssim(r, s) for s in stimuli] for r in recons])
    hits = 0
    for i in range(n):
        own = sims[i, i]
        if all(own > sims[i, j] for j in range(n) if j != i):
            hits += 1
    return hits / n


def metric_report(recon_sets: list[list[np.ndarray]],
                  stimuli: list[np.ndarray],
                  encoder_model=None) -> dict:
    """Per-stimulus Top-1 / Top-K-mean MSE, SSIM, PCC plus aggregates.

    recon_sets[i] is the ranked reconstruction list for stimulus i.
    """
    per_stimulus = []
    for recons, stim in zip(recon_sets, stimuli):
        row = {
            "mse_top1": mse_img(recons[0], stim),
            "ssim_top1": ssim(recons[0], stim),
            "pcc_top1": pcc_img(recons[0], stim),
            "mse_topk": float(np.mean([mse_img(r, stim) for r in recons])),
            "ssim_topk": float(np.mean([ssim(r, stim) for r in recons])),
            "pcc_topk": float(np.mean([pcc_img(r, stim) for r in recons])),
        }
        if encoder_model is not None:
            row["layer_corrs"] = perceptual_layer_corrs(recons[0], stim,
                                                        encoder_model)
        per_stimulus.append(row)
    agg = {}
    for key in ("mse_top1", "ssim_top1", "pcc_top1",
                "mse_topk", "ssim_topk", "pcc_topk"):
        agg[key] = float(np.mean([r[key] for r in per_stimulus]))
    if encoder_model is not None and per_stimulus:
        n_layers = len(per_stimulus[0]["layer_corrs"])
        agg["layer_corrs"] = [
            float(np.mean([r["layer_corrs"][l] for r in per_stimulus]))
            for l in range(n_layers)]
    report = {"per_stimulus": per_stimulus, "aggregate": agg}
    top1 = [rs[0] for rs in recon_sets]
    if len(top1) >= 2:
        report["identification_accuracy"] = identification(top1, stimuli)
    return report
