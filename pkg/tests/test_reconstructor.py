"""Tests for calibration, the effective-voxel mask, candidate scoring, and
the sample-evaluate-rank search."""

import json
import os

import numpy as np
import pytest

from brainrecon import data as D
from brainrecon.encoder import EncoderConfig, EncoderModel, RoiModel, encode_batch
from brainrecon.generator import (FiniteLibrary, GeneratorConfig,
                                  SyntheticGenerator, sample_latent)
from brainrecon.numerics import ParamSet, RngStream
from brainrecon.reconstructor import (DEFAULT_THRESHOLD, Calibration,
                                      Candidate, EffectiveMask,
                                      ReconstructionResult, SearchConfig,
                                      SearchError, _TopK, fit_calibration,
                                      rank_merge, reconstruct, save_result,
                                      score, score_batch)


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

def test_calibration_identity_on_equal_data():
    rng = RngStream(0, ("t", "cal-id"))
    pred = rng.normal((10, 4))
    cal = fit_calibration(pred, pred.copy())
    assert np.allclose(cal.scale, 1.0, atol=1e-9)
    assert np.allclose(cal.bias, 0.0, atol=1e-9)


def test_calibration_inverts_affine():
    rng = RngStream(1, ("t", "cal-aff"))
    true = rng.normal((10, 3))
    pred = 2.0 * true + 3.0
    cal = fit_calibration(pred, true)
    assert np.allclose(cal.scale, 0.5, atol=1e-9)
    assert np.allclose(cal.bias, -1.5, atol=1e-9)


def test_calibration_matches_polyfit_oracle():
    rng = RngStream(2, ("t", "cal-noisy"))
    pred = rng.normal((50, 5))
    true = 1.7 * pred + 0.3 + rng.normal((50, 5)) * 0.5
    cal = fit_calibration(pred, true)
    for j in range(5):
        a, b = np.polyfit(pred[:, j], true[:, j], 1)
        assert abs(cal.scale[j] - a) < 1e-9
        assert abs(cal.bias[j] - b) < 1e-9


def test_calibration_zero_variance_prediction():
    true = np.array([[1.0, 5.0], [2.0, 6.0], [3.0, 7.0]])
    pred = true.copy()
    pred[:, 1] = 4.0
    cal = fit_calibration(pred, true)
    assert cal.scale[1] == 0.0
    assert np.isclose(cal.bias[1], 6.0, atol=1e-12)


def test_calibration_needs_two_samples():
    with pytest.raises(ValueError):
        fit_calibration(np.zeros((1, 2)), np.zeros((1, 2)))


# --------------------------------------------------------------------------
# Effective mask and scoring
# --------------------------------------------------------------------------

def test_mask_threshold_and_concat_order():
    corr = {"V1": np.array([0.9, 0.1]), "V2": np.array([0.27, 0.28]),
            "V3": np.array([-0.5, 0.99])}
    mask = EffectiveMask.from_correlations(corr, 0.27)
    assert mask.mask.tolist() == [True, False, False, True, False, True]
    assert mask.threshold == 0.27
    assert DEFAULT_THRESHOLD == 0.27


def test_mask_rejects_no_effective_voxels():
    corr = {roi: np.array([0.1, 0.2]) for roi in D.ENCODED_ROIS}
    with pytest.raises(SearchError):
        EffectiveMask.from_correlations(corr, 0.27)


def test_score_zero_when_calibrated_pred_matches():
    rng = RngStream(3, ("t", "score0"))
    target = rng.normal(6)
    cal = Calibration(np.full(6, 2.0), np.full(6, -1.0))
    pred = (target + 1.0) / 2.0
    mask = EffectiveMask(np.ones(6, bool), 0.0)
    assert score(pred, target, cal, mask) < 1e-24


def test_score_single_voxel_example():
    # one effective voxel, a=1, b=0, pred=1, target=3 -> (1-3)^2 = 4
    cal = Calibration.identity(2)
    mask = EffectiveMask(np.array([True, False]), 0.0)
    got = score(np.array([1.0, 9.0]), np.array([3.0, -7.0]), cal, mask)
    assert got == 4.0


def test_score_ignores_ineffective_voxels_bitwise():
    rng = RngStream(4, ("t", "score-mask"))
    cal = Calibration(rng.normal(5) + 2.0, rng.normal(5))
    mask = EffectiveMask(np.array([True, False, True, False, True]), 0.0)
    target = rng.normal(5)
    pred = rng.normal(5)
    base = score(pred, target, cal, mask)
    pred2 = pred.copy()
    pred2[1] = 1e9
    pred2[3] = -1e9
    assert score(pred2, target, cal, mask) == base


def test_score_batch_matches_scalar_score():
    rng = RngStream(5, ("t", "score-batch"))
    cal = Calibration(rng.normal(4) + 1.5, rng.normal(4))
    mask = EffectiveMask(np.array([True, True, False, True]), 0.0)
    target = rng.normal(4)
    preds = rng.normal((6, 4))
    batch = score_batch(preds, target, cal, mask)
    for i in range(6):
        assert np.isclose(batch[i], score(preds[i], target, cal, mask),
                          atol=1e-15)


# --------------------------------------------------------------------------
# SearchConfig, TopK, rank_merge
# --------------------------------------------------------------------------

def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(mode="magic")
    with pytest.raises(ValueError):
        SearchConfig(mode="fixed")
    with pytest.raises(ValueError):
        SearchConfig(batch=2, iterations=2, topk=5)
    SearchConfig(mode="fixed", fixed_label=3)


def _cand(score_v, it, slot):
    return Candidate(0, None, np.zeros((16, 16)), score_v, it, slot)


def test_topk_order_and_tie_break():
    top = _TopK(3)
    for c in [_cand(0.5, 2, 1), _cand(0.2, 1, 5), _cand(0.2, 1, 2),
              _cand(0.9, 0, 0), _cand(0.2, 0, 9)]:
        top.push(c)
    ranked = top.ranked()
    assert [c.score for c in ranked] == [0.2, 0.2, 0.2]
    # ties ordered by (iteration, slot)
    assert [(c.iteration, c.slot) for c in ranked] == [(0, 9), (1, 2), (1, 5)]


def test_rank_merge_single_shard_identity():
    cands = [_cand(0.1, 0, 0), _cand(0.3, 0, 1)]
    merged = rank_merge([(cands, range(0, 2))], 2)
    assert [c.score for c in merged] == [0.1, 0.3]


def test_rank_merge_overlap_rejected():
    with pytest.raises(SearchError):
        rank_merge([([], range(0, 2)), ([], range(1, 3))], 5)


# --------------------------------------------------------------------------
# Search fixtures: a small trained-free world with an exact oracle encoder
# --------------------------------------------------------------------------

RES = 16
N_VOX = 10


def _oracle_encoder(truth):
    """Exact scoring model: the hidden world encoder with its per-voxel
    standardization folded into the linear readout."""
    true_enc = D.TrueEncoder.from_json(truth.encoder_params)
    cfg = EncoderConfig(seed=0)
    rois = {}
    for roi in D.ENCODED_ROIS:
        p = true_enc.params[roi]
        mu = truth.signal_mu[roi]
        sigma = truth.signal_sigma[roi]
        ps = ParamSet()
        ps.add("conv0.k", p["k1"])
        ps.add("conv0.b", p["b1"])
        ps.add("conv1.k", p["k2"])
        ps.add("conv1.b", p["b2"])
        ps.add("fc.w", p["w"] / sigma)
        ps.add("fc.b", (p["b"] - mu) / sigma)
        rois[roi] = RoiModel(roi, D.TrueEncoder.KERNELS[roi], ps,
                             true_enc.resolution, len(mu))
    return EncoderModel(cfg, rois)


@pytest.fixture(scope="module")
def oracle_world():
    gen = SyntheticGenerator(GeneratorConfig(resolution=RES, seed=0))
    cfg = D.WorldConfig(n_train=30, n_test=3, voxels_per_roi=N_VOX,
                        noise_std=0.0, resolution=RES)
    ds, truth = D.make_world(31, cfg, gen)
    enc = _oracle_encoder(truth)
    calib = Calibration.identity(3 * N_VOX)
    mask = EffectiveMask(np.ones(3 * N_VOX, bool), 0.27)
    return gen, ds, truth, enc, calib, mask


def test_oracle_encoder_reproduces_zero_noise_voxels(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    images = np.stack([s.image for s in ds.test])
    preds = encode_batch(enc, images)
    for i, s in enumerate(ds.test):
        for roi in D.ENCODED_ROIS:
            assert np.allclose(preds[roi][i], s.voxels.rois[roi], atol=1e-9)


def test_reconstruct_recovers_injected_truth(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    cfg = SearchConfig(batch=4, iterations=2, topk=3, mode="random", seed=1)
    for i, s in enumerate(ds.test):
        tt = truth.test_truth[i]
        injected = {(0, 0): (tt["fine"], np.array(tt["latent"]))}
        res = reconstruct(s.id, s.voxels, gen, enc, calib, mask, cfg,
                          injected=injected)
        best = res.candidates[0]
        assert best.score < 1e-10
        assert best.iteration == 0 and best.slot == 0
        assert best.fine == tt["fine"]
        assert np.array_equal(best.image, s.image)


def test_reconstruct_deterministic_and_worker_independent(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    cfg = SearchConfig(batch=5, iterations=4, topk=6, mode="random", seed=9)
    s = ds.test[0]
    runs = [reconstruct(s.id, s.voxels, gen, enc, calib, mask, cfg),
            reconstruct(s.id, s.voxels, gen, enc, calib, mask, cfg),
            reconstruct(s.id, s.voxels, gen, enc, calib, mask, cfg,
                        workers=4)]
    base = runs[0]
    assert base.n_evaluated == 20
    for other in runs[1:]:
        assert [c.score for c in other.candidates] == \
               [c.score for c in base.candidates]
        assert [(c.iteration, c.slot) for c in other.candidates] == \
               [(c.iteration, c.slot) for c in base.candidates]
        for ca, cb in zip(base.candidates, other.candidates):
            assert np.array_equal(ca.image, cb.image)


def test_reconstruct_result_scores_sorted(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    cfg = SearchConfig(batch=6, iterations=3, topk=10, mode="random", seed=2)
    res = reconstruct("x", ds.test[1].voxels, gen, enc, calib, mask, cfg)
    scores = res.scores()
    assert len(scores) == 10
    assert scores == sorted(scores)


def test_reconstruct_best_score_monotone_in_iterations(oracle_world):
    # iteration t uses an rng keyed only by (seed, t), so a longer run's
    # candidate set is a superset of a shorter run's
    gen, ds, truth, enc, calib, mask = oracle_world
    s = ds.test[2]
    best = []
    for t in (1, 2, 4, 8):
        cfg = SearchConfig(batch=4, iterations=t, topk=1, mode="random",
                           seed=3)
        res = reconstruct(s.id, s.voxels, gen, enc, calib, mask, cfg)
        best.append(res.candidates[0].score)
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))


def test_reconstruct_affine_transform_of_encoder_keeps_ranking(oracle_world):
    # positive per-voxel affine transform of encoder outputs + refit
    # calibration leaves candidate rankings unchanged
    gen, ds, truth, enc, calib, mask = oracle_world
    rng = RngStream(33, ("t", "affine"))
    scale = {roi: rng.uniform(0.5, 3.0, N_VOX) for roi in D.ENCODED_ROIS}
    shift = {roi: rng.normal(N_VOX) for roi in D.ENCODED_ROIS}

    moved = EncoderModel(enc.config, {
        roi: RoiModel(roi, m.kernel, _scaled_params(m.params, scale[roi],
                                                    shift[roi]),
                      m.resolution, m.n_voxels)
        for roi, m in enc.rois.items()})

    train_imgs = np.stack([s.image for s in ds.train])
    true_mat = np.stack([s.voxels.concat(D.ENCODED_ROIS) for s in ds.train])

    def calibrated(model):
        preds = encode_batch(model, train_imgs)
        mat = np.concatenate([preds[r] for r in D.ENCODED_ROIS], axis=1)
        return fit_calibration(mat, true_mat)

    cfg = SearchConfig(batch=8, iterations=2, topk=16, mode="random", seed=5)
    s = ds.test[0]
    res_a = reconstruct(s.id, s.voxels, gen, enc, calibrated(enc), mask, cfg)
    res_b = reconstruct(s.id, s.voxels, gen, moved, calibrated(moved), mask,
                        cfg)
    assert [(c.iteration, c.slot) for c in res_a.candidates] == \
           [(c.iteration, c.slot) for c in res_b.candidates]
    assert np.allclose(res_a.scores(), res_b.scores(), atol=1e-6)


def _scaled_params(params, scale, shift):
    ps = ParamSet()
    for name, p in params.items():
        if name == "fc.w":
            ps.add(name, p.value * scale)
        elif name == "fc.b":
            ps.add(name, p.value * scale + shift)
        else:
            ps.add(name, p.value.copy())
    return ps


def test_reconstruct_mode_requirements(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    s = ds.test[0]
    with pytest.raises(SearchError):
        reconstruct(s.id, s.voxels, gen, enc, calib, mask,
                    SearchConfig(mode="predicted", batch=2, iterations=1,
                                 topk=1))
    with pytest.raises(SearchError):
        reconstruct(s.id, s.voxels, gen, enc, calib, mask,
                    SearchConfig(mode="library", batch=2, iterations=1,
                                 topk=1))


def test_reconstruct_fixed_mode_restricts_categories(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    cmap = D.CategoryMap.default()
    cfg = SearchConfig(batch=6, iterations=3, topk=10, mode="fixed",
                       fixed_label=0, seed=4)
    res = reconstruct("x", ds.test[0].voxels, gen, enc, calib, mask, cfg,
                      category_map=cmap)
    allowed = set(cmap.sets[0])
    assert all(c.fine in allowed for c in res.candidates)


def test_reconstruct_library_mode_cycles_entries(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    lib = FiniteLibrary.build(gen, 5, seed=2)
    cfg = SearchConfig(batch=4, iterations=3, topk=12, mode="library",
                       seed=6)
    res = reconstruct("x", ds.test[0].voxels, gen, enc, calib, mask, cfg,
                      library=lib)
    assert res.n_evaluated == 12
    lib_imgs = {e.id: e.image for e in lib.entries}
    for c in res.candidates:
        idx = (c.iteration * cfg.batch + c.slot) % len(lib)
        assert np.array_equal(c.image, lib.entries[idx].image)


def test_truncation_bounds_candidate_latents(oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    cfg = SearchConfig(batch=6, iterations=2, topk=12, mode="random",
                       truncation=0.7, seed=7)
    res = reconstruct("x", ds.test[0].voxels, gen, enc, calib, mask, cfg)
    for c in res.candidates:
        assert np.all(np.abs(c.latent) <= 0.7)


def test_save_result_layout(tmp_path, oracle_world):
    gen, ds, truth, enc, calib, mask = oracle_world
    cfg = SearchConfig(batch=4, iterations=2, topk=3, mode="random", seed=8)
    res = reconstruct("tgt", ds.test[0].voxels, gen, enc, calib, mask, cfg)
    out = str(tmp_path / "tgt")
    save_result(res, out, extra_config={"note": 1})
    with open(os.path.join(out, "report.json")) as f:
        rep = json.load(f)
    assert rep["target_id"] == "tgt"
    assert rep["run_config"] == {"note": 1}
    assert [c["rank"] for c in rep["candidates"]] == [1, 2, 3]
    for c in rep["candidates"]:
        img = D.load_pgm(os.path.join(out, c["image"]))
        assert img.shape == (RES, RES)
        assert len(c["latent"]) == 120
    scores = [c["score"] for c in rep["candidates"]]
    assert scores == sorted(scores)
