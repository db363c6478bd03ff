"""Candidate search and ranking: calibrate predicted-vs-true voxel spaces,
mask ineffective voxels, score candidates by calibrated voxel MSE, and run
the batched sample-evaluate-rank loop returning Top-K reconstructions.

The Bayesian split is literal here: candidate images come only from the
generator (the naturalness prior) and the score touches only voxel space
(the fidelity likelihood); no pixel-space term enters the score.
"""

from __future__ import annotations

import heapq
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream
from .data import ENCODED_ROIS, VoxelRecord, preprocess, save_pgm
from .generator import sample_latent as gen_sample_latent

DEFAULT_THRESHOLD = 0.27


class SearchError(Exception):
    pass


# --------------------------------------------------------------------------
# Calibration and effective-voxel mask (over concatenated V1-V3)
# --------------------------------------------------------------------------

@dataclass
class Calibration:
    scale: np.ndarray            # per-voxel a
    bias: np.ndarray             # per-voxel b

    @classmethod
    def identity(cls, n: int) -> "Calibration":
        return cls(np.ones(n), np.zeros(n))


def fit_calibration(pred_train: np.ndarray, true_train: np.ndarray) -> Calibration:
    """Per-voxel least squares true ~ a * pred + b, closed form.

    Zero-variance predictions get a = 0, b = mean(true).
    """
    if pred_train.shape[0] < 2:
        raise ValueError("fit_calibration: need at least 2 samples")
    pm = pred_train.mean(axis=0)
    tm = true_train.mean(axis=0)
    pc = pred_train - pm
    var = (pc * pc).sum(axis=0)
    cov = (pc * (true_train - tm)).sum(axis=0)
    ok = var > 0
    a = np.zeros(pred_train.shape[1])
    a[ok] = cov[ok] / var[ok]
    b = tm - a * pm
    return Calibration(a, b)


@dataclass
class EffectiveMask:
    mask: np.ndarray             # boolean per concatenated V1-V3 voxel
    threshold: float

    @classmethod
    def from_correlations(cls, train_corr: dict[str, np.ndarray],
                          threshold: float = DEFAULT_THRESHOLD) -> "EffectiveMask":
        r = np.concatenate([train_corr[roi] for roi in ENCODED_ROIS])
        mask = r > threshold
        if not mask.any():
            raise SearchError(
                "no voxel exceeds the effectiveness threshold %.3g" % threshold)
        return cls(mask, threshold)


def score(pred: np.ndarray, target: np.ndarray, calib: Calibration,
          mask: EffectiveMask) -> float:
    """Mean squared calibrated error over effective voxels."""
    m = mask.mask
    d = calib.scale[m] * pred[m] + calib.bias[m] - target[m]
    return float((d * d).mean())


def score_batch(pred: np.ndarray, target: np.ndarray, calib: Calibration,
                mask: EffectiveMask) -> np.ndarray:
    m = mask.mask
    d = calib.scale[m] * pred[:, m] + calib.bias[m] - target[m]
    return (d * d).mean(axis=1)


# --------------------------------------------------------------------------
# Candidates and results
# --------------------------------------------------------------------------

@dataclass
class Candidate:
    fine: int
    latent: np.ndarray | None
    image: np.ndarray            # preprocessed grayscale
    score: float
    iteration: int
    slot: int

    @property
    def order_key(self):
        return (self.score, self.iteration, self.slot)


@dataclass
class SearchConfig:
    batch: int = 64
    iterations: int = 25
    topk: int = 10
    mode: str = "predicted"      # predicted | random | fixed | library
    fixed_label: int | None = None
    truncation: float | None = None
    mask_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("predicted", "random", "fixed", "library"):
            raise ValueError("unknown search mode %r" % self.mode)
        if self.mode == "fixed" and self.fixed_label is None:
            raise ValueError("fixed mode needs fixed_label")
        if self.batch * self.iterations < self.topk:
            raise ValueError("batch * iterations must be >= topk")


@dataclass
class ReconstructionResult:
    target_id: str
    mode: str
    decoded_label: int | None
    decoded_probs: list[float] | None
    candidates: list[Candidate]       # ranked, best first
    config: SearchConfig
    n_evaluated: int = 0

    def scores(self) -> list[float]:
        return [c.score for c in self.candidates]


# --------------------------------------------------------------------------
# Search
# --------------------------------------------------------------------------

class _TopK:
    """Bounded best-score set with deterministic (score, iteration, slot) order."""

    def __init__(self, k: int):
        self.k = k
        self._heap: list[tuple] = []      # max-heap via negated keys

    def push(self, cand: Candidate) -> None:
        key = tuple(-v for v in cand.order_key)
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, (key, cand))
        elif key > self._heap[0][0]:
            heapq.heapreplace(self._heap, (key, cand))

    def ranked(self) -> list[Candidate]:
        return [c for _, c in sorted(self._heap, key=lambda e: e[1].order_key)]


def _category_stream(cfg: SearchConfig, category_map, decoded_label, n_fine: int):
    """Per-candidate fine-category draw, deterministic in the caller's rng."""
    if cfg.mode == "random":
        return lambda r: int(r.integers(0, n_fine))
    if cfg.mode == "predicted":
        fine_set = category_map.sets[decoded_label]
    else:  # fixed
        fine_set = category_map.sets[cfg.fixed_label]
    return lambda r: fine_set[int(r.integers(0, len(fine_set)))]


def _evaluate_images(images: np.ndarray, target: np.ndarray, encoder_model,
                     calib: Calibration, mask: EffectiveMask,
                     encode_batch_fn) -> np.ndarray:
    preds = encode_batch_fn(encoder_model, images)
    pred_mat = np.concatenate([preds[roi] for roi in ENCODED_ROIS], axis=1)
    return score_batch(pred_mat, target, calib, mask)


def _run_iterations(iter_range, target, cfg, generator, encoder_model, calib,
                    mask, draw_category, library, injected, encode_batch_fn):
    top = _TopK(cfg.topk)
    count = 0
    for t in iter_range:
        rng_t = RngStream(cfg.seed, ("search", "iter", str(t)))
        cands = []
        if cfg.mode == "library":
            # deterministic slot -> library-entry mapping, one epoch per cycle
            for s in range(cfg.batch):
                idx = (t * cfg.batch + s) % len(library)
                e = library[idx]
                cands.append((e.fine, e.latent, e.image))
        else:
            for s in range(cfg.batch):
                r = rng_t.child("slot", s)
                inj = injected.get((t, s)) if injected else None
                if inj is not None:
                    fine, z = inj
                else:
                    fine = draw_category(r.child("cat"))
                    tau = cfg.truncation
                    if tau is None:
                        tau = generator.config.truncation
                    z = gen_sample_latent(r.child("z"), tau)
                img = preprocess(generator.generate(fine, z), cfg.mask_radius)
                cands.append((fine, z, img))
        images = np.stack([c[2] for c in cands])
        scores = _evaluate_images(images, target, encoder_model, calib, mask,
                                  encode_batch_fn)
        count += len(cands)
        for s, ((fine, z, img), sc) in enumerate(zip(cands, scores)):
            top.push(Candidate(fine, z, img, float(sc), t, s))
    return top.ranked(), count


def rank_merge(shards: list[tuple[list[Candidate], range]],
               topk: int) -> list[Candidate]:
    """Merge per-shard Top-K sets; shards must cover disjoint iteration ranges."""
    seen = set()
    for _, rng_range in shards:
        for t in rng_range:
            if t in seen:
                raise SearchError("overlapping shard iteration ranges at %d" % t)
            seen.add(t)
    top = _TopK(topk)
    for cands, _ in shards:
        for c in cands:
            top.push(c)
    return top.ranked()


def reconstruct(target_id: str, target_voxels: VoxelRecord, generator,
                encoder_model, calib: Calibration, mask: EffectiveMask,
                cfg: SearchConfig, category_map=None, decoder_model=None,
                library=None, workers: int = 1,
                injected: dict | None = None) -> ReconstructionResult:
    """Run the batched sample-evaluate-rank search for one target.

    `injected` optionally maps (iteration, slot) -> (fine, latent) to force
    specific candidates into the stream (oracle testing hook).  The result
    is bit-identical for any worker count.
    """
    from .encoder import encode_batch as encode_batch_fn

    decoded_label = decoded_probs = None
    filtered_library = library
    if cfg.mode in ("predicted", "library") and decoder_model is not None:
        from .decoder import decode_category
        decoded_label, probs = decode_category(decoder_model, target_voxels)
        decoded_probs = [float(p) for p in probs]
    if cfg.mode == "predicted" and decoded_label is None:
        raise SearchError("predicted mode requires a decoder model")
    if cfg.mode == "library":
        if library is None:
            raise SearchError("library mode requires a library")
        if decoded_label is not None:
            filtered_library = _restricted_entries(
                library, category_map.sets[decoded_label], decoded_label)
        else:
            filtered_library = list(library.entries)

    draw_category = None
    if cfg.mode != "library":
        draw_category = _category_stream(cfg, category_map, decoded_label,
                                         generator.config.n_fine_categories)

    target = target_voxels.concat(ENCODED_ROIS)
    ranges = _split_ranges(cfg.iterations, max(1, workers))
    args = [(r, target, cfg, generator, encoder_model, calib, mask,
             draw_category, filtered_library, injected, encode_batch_fn)
            for r in ranges]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(lambda a: _run_iterations(*a), args))
    else:
        outs = [_run_iterations(*a) for a in args]
    shards = [(cands, r) for (cands, _), r in zip(outs, ranges)]
    ranked = rank_merge(shards, cfg.topk)
    n_eval = sum(c for _, c in outs)
    return ReconstructionResult(target_id, cfg.mode, decoded_label,
                                decoded_probs, ranked, cfg, n_eval)


def _restricted_entries(library, fine_set, coarse_label):
    allowed = set(int(v) for v in fine_set)
    entries = [e for e in library.entries if e.fine in allowed]
    if not entries:
        raise SearchError("library has no entries for coarse label %s"
                          % coarse_label)
    return entries


def _split_ranges(n_iterations: int, shards: int) -> list[range]:
    shards = min(shards, n_iterations)
    base = n_iterations // shards
    rem = n_iterations % shards
    ranges, start = [], 0
    for i in range(shards):
        size = base + (1 if i < rem else 0)
        ranges.append(range(start, start + size))
        start += size
    return ranges


# --------------------------------------------------------------------------
# Result serialization
# --------------------------------------------------------------------------

def save_result(result: ReconstructionResult, directory: str,
                extra_config: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for rank, c in enumerate(result.candidates, start=1):
        img_name = "rank_%d.pgm" % rank
        save_pgm(os.path.join(directory, img_name), c.image)
        entries.append({
            "rank": rank,
            "fine_category": c.fine,
            "latent": None if c.latent is None else [float(v) for v in c.latent],
            "score": c.score,
            "iteration": c.iteration,
            "slot": c.slot,
            "image": img_name,
        })
    report = {
        "target_id": result.target_id,
        "mode": result.mode,
        "decoded_label": result.decoded_label,
        "decoded_probs": result.decoded_probs,
        "n_evaluated": result.n_evaluated,
        "config": {
            "batch": result.config.batch,
            "iterations": result.config.iterations,
            "topk": result.config.topk,
            "mode": result.config.mode,
            "fixed_label": result.config.fixed_label,
            "truncation": result.config.truncation,
            "mask_radius": result.config.mask_radius,
            "seed": result.config.seed,
        },
        "candidates": entries,
    }
    if extra_config:
        report["run_config"] = extra_config
    with open(os.path.join(directory, "report.json"), "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
