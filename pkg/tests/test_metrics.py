"""Tests for image-space evaluation metrics, with skimage as the SSIM
reference oracle."""

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from brainrecon import data as D
from brainrecon.encoder import EncoderConfig, EncoderModel, RoiModel, init_roi_params
from brainrecon.metrics import (identification, metric_report, mse_img,
                                pcc_img, perceptual_layer_corrs, ssim)
from brainrecon.numerics import RngStream


def _img(seed, n=32):
    return RngStream(seed, ("t", "img")).uniform(size=(n, n))


def _smooth_img(seed, n=32):
    rng = RngStream(seed, ("t", "smooth"))
    yy, xx = np.mgrid[0:n, 0:n] / n
    out = np.full((n, n), 0.5)
    for _ in range(4):
        f = rng.uniform(1, 4, 2)
        ph = rng.uniform(0, 2 * np.pi)
        out += 0.1 * np.sin(2 * np.pi * (f[0] * xx + f[1] * yy) + ph)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# MSE / PCC
# --------------------------------------------------------------------------

def test_mse_pcc_self():
    x = _img(0)
    assert mse_img(x, x) == 0.0
    assert np.isclose(pcc_img(x, x), 1.0, atol=1e-12)


def test_mse_black_vs_white():
    assert mse_img(np.zeros((8, 8)), np.ones((8, 8))) == 1.0


def test_mse_pcc_dimension_mismatch():
    with pytest.raises(ValueError):
        mse_img(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        pcc_img(np.zeros((8, 8)), np.zeros((9, 8)))


def test_metrics_symmetric():
    a, b = _img(1), _img(2)
    assert mse_img(a, b) == mse_img(b, a)
    assert abs(pcc_img(a, b) - pcc_img(b, a)) < 1e-12
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

def test_ssim_self_is_one():
    assert abs(ssim(_img(3), _img(3)) - 1.0) < 1e-12


def test_ssim_matches_skimage_oracle():
    for seed in range(5):
        a, b = _img(seed, 24), _img(seed + 100, 24)
        want = structural_similarity(
            a, b, win_size=11, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0)
        assert abs(ssim(a, b) - want) < 1e-12


def test_ssim_inverted_texture_negative():
    x = _smooth_img(4)
    assert ssim(x, 1.0 - x) < 0.0


def test_ssim_constant_images_luminance_closed_form():
    a = np.full((16, 16), 0.4)
    b = np.full((16, 16), 0.5)
    c1 = 0.01 ** 2
    want = (2 * 0.4 * 0.5 + c1) / (0.4 ** 2 + 0.5 ** 2 + c1)
    assert abs(ssim(a, b) - want) < 1e-12


def test_ssim_rigid_transform_of_both_images():
    # same-window alignment: applying the identical rigid transform to
    # both images preserves the set of compared windows exactly
    a, b = _img(5), _img(6)
    base = ssim(a, b)
    assert abs(ssim(np.flipud(a), np.flipud(b)) - base) < 1e-12
    assert abs(ssim(np.fliplr(a), np.fliplr(b)) - base) < 1e-12
    assert abs(ssim(a.T, b.T) - base) < 1e-12


def test_ssim_too_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_range():
    for seed in range(5):
        v = ssim(_img(seed), _img(seed + 50))
        assert -1.0 <= v <= 1.0


# --------------------------------------------------------------------------
# Perceptual layer correlations
# --------------------------------------------------------------------------

def _random_encoder(res=16, n_vox=4, seed=0):
    cfg = EncoderConfig(seed=seed)
    rois = {}
    for roi in D.ENCODED_ROIS:
        params = init_roi_params(roi, cfg.kernels[roi], res, n_vox, 8, 2,
                                 RngStream(seed, ("t", "pl", roi)))
        rois[roi] = RoiModel(roi, cfg.kernels[roi], params, res, n_vox)
    return EncoderModel(cfg, rois)


def test_layer_corrs_identical_images():
    model = _random_encoder()
    x = _img(9, 16)
    corrs = perceptual_layer_corrs(x, x, model)
    assert len(corrs) == 6
    assert all(abs(c - 1.0) < 1e-9 for c in corrs)


def test_layer_corrs_noisy_copy_trend():
    # empirical oracle: over 50 seeded pairs, no conv stage exceeds the
    # raw-pixel PCC by more than 0.2 on average
    model = _random_encoder()
    pixel = []
    layers = []
    for seed in range(50):
        a = _smooth_img(seed, 16)
        # structured (smooth) perturbation: white noise would be filtered
        # out by the conv stages and make the comparison vacuous
        b = np.clip(0.6 * a + 0.4 * _smooth_img(seed + 500, 16), 0.0, 1.0)
        pixel.append(pcc_img(a, b))
        layers.append(perceptual_layer_corrs(a, b, model))
    pixel_mean = np.mean(pixel)
    layer_means = np.mean(layers, axis=0)
    assert len(layer_means) == 6
    assert np.all(layer_means <= pixel_mean + 0.2)


# --------------------------------------------------------------------------
# Identification
# --------------------------------------------------------------------------

def test_identification_perfect():
    stimuli = [_img(i) for i in range(4)]
    assert identification([s.copy() for s in stimuli], stimuli) == 1.0


def test_identification_swapped_pair():
    a, b = _img(20), _img(21)
    assert identification([b, a], [a, b]) == 0.0


def test_identification_validation():
    with pytest.raises(ValueError):
        identification([_img(0)], [_img(0), _img(1)])
    with pytest.raises(ValueError):
        identification([_img(0)], [_img(0)])


def test_identification_chance_level_small():
    # reconstructions independent of stimuli: accuracy ~ 1/N
    n, trials = 4, 30
    hits = 0.0
    for t in range(trials):
        stimuli = [_img(1000 + t * 10 + i, 16) for i in range(n)]
        recons = [_img(5000 + t * 10 + i, 16) for i in range(n)]
        hits += identification(recons, stimuli) * n
    total = trials * n
    p = 1.0 / n
    sigma = np.sqrt(total * p * (1 - p))
    assert abs(hits - total * p) <= 3 * sigma


# --------------------------------------------------------------------------
# metric_report
# --------------------------------------------------------------------------

def test_metric_report_aggregation():
    stimuli = [_img(30 + i) for i in range(3)]
    recon_sets = [[_img(40 + i * 5 + r) for r in range(4)] for i in range(3)]
    rep = metric_report(recon_sets, stimuli)
    assert len(rep["per_stimulus"]) == 3
    for i, row in enumerate(rep["per_stimulus"]):
        # Top-K mean equals the arithmetic mean of per-rank values
        want = np.mean([mse_img(r, stimuli[i]) for r in recon_sets[i]])
        assert abs(row["mse_topk"] - want) < 1e-12
        assert abs(row["mse_top1"] - mse_img(recon_sets[i][0],
                                             stimuli[i])) < 1e-12
    for key in ("mse_top1", "ssim_top1", "pcc_top1"):
        want = np.mean([r[key] for r in rep["per_stimulus"]])
        assert abs(rep["aggregate"][key] - want) < 1e-12
    assert "identification_accuracy" in rep


def test_metric_report_with_encoder_layers():
    model = _random_encoder()
    stimuli = [_img(60, 16), _img(61, 16)]
    recon_sets = [[_img(70, 16)], [_img(71, 16)]]
    rep = metric_report(recon_sets, stimuli, encoder_model=model)
    assert len(rep["aggregate"]["layer_corrs"]) == 6
    for row in rep["per_stimulus"]:
        assert len(row["layer_corrs"]) == 6
