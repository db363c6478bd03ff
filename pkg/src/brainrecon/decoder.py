"""Coarse-category decoder: a bidirectional LSTM reading the five-ROI voxel
sequence (V1 -> LO forward, LO -> V1 backward), final hidden states of both
directions concatenated into a dense softmax layer over the 10 coarse
categories.  Includes ANOVA-based voxel pre-selection and the coarse-to-fine
category lookup feeding the generator.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import (Optimizer, OptimizerConfig, ParamSet, RngStream,
                       dense_backward, dense_forward, lstm_step,
                       lstm_step_backward, softmax, softmax_xent)
from .data import Dataset, ROI_NAMES, Sample, VoxelRecord, CategoryMap, N_COARSE


@dataclass
class DecoderConfig:
    voxels_per_node: int = 100
    hidden_per_direction: int = 16
    n_classes: int = N_COARSE
    dropout_rate: float = 0.5
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 32
    validation_fraction: float = 0.0
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return 2 * self.hidden_per_direction


# --------------------------------------------------------------------------
# Voxel pre-selection (one-way ANOVA F-score against training labels)
# --------------------------------------------------------------------------

def anova_f_scores(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-column one-way ANOVA F of (N, n_vox) values grouped by labels."""
    n = values.shape[0]
    groups = np.unique(labels)
    grand = values.mean(axis=0)
    ss_between = np.zeros(values.shape[1])
    ss_within = np.zeros(values.shape[1])
    for g in groups:
        sel = values[labels == g]
        m = sel.mean(axis=0)
        ss_between += sel.shape[0] * (m - grand) ** 2
        ss_within += ((sel - m) ** 2).sum(axis=0)
    df_b = len(groups) - 1
    df_w = n - len(groups)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (ss_between / df_b) / (ss_within / df_w)
    return np.where(np.isfinite(f), f, np.inf)


def select_voxels(train: list[Sample], n_per_roi: int) -> dict[str, list[int]]:
    """Top-n voxels per ROI by ANOVA F-score; ties broken by lower index."""
    labels = np.array([s.label for s in train])
    selection = {}
    for roi in ROI_NAMES:
        mat = np.stack([s.voxels.rois[roi] for s in train])
        if mat.shape[1] < n_per_roi:
            raise ValueError("ROI %s has %d voxels, need %d"
                             % (roi, mat.shape[1], n_per_roi))
        f = anova_f_scores(mat, labels)
        # stable sort on -f keeps lower indices first among ties
        order = np.argsort(-f, kind="stable")[:n_per_roi]
        selection[roi] = sorted(int(i) for i in order)
    return selection


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

@dataclass
class DecoderModel:
    config: DecoderConfig
    params: ParamSet
    selection: dict[str, list[int]]
    history: list[dict] = field(default_factory=list)


def init_decoder_params(config: DecoderConfig, rng: RngStream) -> ParamSet:
    d = config.voxels_per_node
    h = config.hidden_per_direction
    params = ParamSet()
    for direction in ("fwd", "bwd"):
        r = rng.child(direction)
        params.add("%s.wx" % direction, r.normal((d, 4 * h)) / np.sqrt(d))
        params.add("%s.wh" % direction, r.normal((h, 4 * h)) / np.sqrt(h))
        params.add("%s.b" % direction, np.zeros(4 * h))
    r = rng.child("out")
    params.add("out.w", r.normal((2 * h, config.n_classes)) / np.sqrt(2 * h))
    params.add("out.b", np.zeros(config.n_classes))
    return params


def _run_direction(params: ParamSet, prefix: str, seq: list[np.ndarray]):
    """Run one LSTM direction over the sequence; returns final h and caches."""
    batch = seq[0].shape[0]
    h = np.zeros((batch, params["%s.wh" % prefix].value.shape[0]))
    c = np.zeros_like(h)
    caches = []
    for x in seq:
        h, c, cache = lstm_step(x, h, c,
                                params["%s.wx" % prefix].value,
                                params["%s.wh" % prefix].value,
                                params["%s.b" % prefix].value)
        caches.append(cache)
    return h, caches


def _backprop_direction(params: ParamSet, prefix: str, caches, dh_final):
    dh = dh_final
    dc = np.zeros_like(dh)
    for cache in reversed(caches):
        _, dh, dc, dwx, dwh, db = lstm_step_backward(dh, dc, cache)
        params["%s.wx" % prefix].grad += dwx
        params["%s.wh" % prefix].grad += dwh
        params["%s.b" % prefix].grad += db


def decoder_forward_batch(params: ParamSet, config: DecoderConfig,
                          seq: np.ndarray, train_mode: bool = False,
                          rng: RngStream | None = None):
    """seq: (5, B, voxels_per_node) ordered V1..LO.  Returns (probs, cache)."""
    if seq.shape[0] != len(ROI_NAMES) or seq.shape[2] != config.voxels_per_node:
        raise ValueError("decoder: expected sequence (5, B, %d), got %s"
                         % (config.voxels_per_node, seq.shape))
    fwd_seq = [seq[t] for t in range(len(ROI_NAMES))]
    bwd_seq = fwd_seq[::-1]
    hf, caches_f = _run_direction(params, "fwd", fwd_seq)
    hb, caches_b = _run_direction(params, "bwd", bwd_seq)
    feat = np.concatenate([hf, hb], axis=1)
    mask = None
    if train_mode and config.dropout_rate > 0:
        if rng is None:
            raise ValueError("decoder: train_mode dropout needs an rng")
        keep = 1.0 - config.dropout_rate
        mask = (rng.uniform(size=feat.shape) < keep) / keep
        feat = feat * mask
    logits, dense_cache = dense_forward(feat, params["out.w"].value,
                                        params["out.b"].value)
    probs = softmax(logits)
    cache = (caches_f, caches_b, dense_cache, mask, probs)
    return probs, cache


def decoder_backward_batch(params: ParamSet, config: DecoderConfig,
                           cache, labels: np.ndarray) -> None:
    """Accumulate gradients of mean cross-entropy over the batch."""
    caches_f, caches_b, dense_cache, mask, probs = cache
    b = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    dfeat, dw, dbias = dense_backward(dlogits, dense_cache)
    params["out.w"].grad += dw
    params["out.b"].grad += dbias
    if mask is not None:
        dfeat = dfeat * mask
    h = config.hidden_per_direction
    _backprop_direction(params, "fwd", caches_f, dfeat[:, :h])
    _backprop_direction(params, "bwd", caches_b, dfeat[:, h:])


def decoder_forward(model: DecoderModel, voxel_sequence: list[np.ndarray],
                    train_mode: bool = False,
                    rng: RngStream | None = None) -> np.ndarray:
    """Single-sample forward: 5 vectors (V1..LO order) -> 10 probabilities."""
    seq = np.stack([np.asarray(v, dtype=np.float64)[None]
                    for v in voxel_sequence])
    probs, _ = decoder_forward_batch(model.params, model.config, seq,
                                     train_mode, rng)
    return probs[0]


def _sequence_from_record(record: VoxelRecord,
                          selection: dict[str, list[int]]) -> list[np.ndarray]:
    return [record.rois[roi][selection[roi]] for roi in ROI_NAMES]


def decode_category(model: DecoderModel, voxels: VoxelRecord):
    """Argmax class (ties to the lower index) plus the full probability row."""
    probs = decoder_forward(model, _sequence_from_record(voxels, model.selection))
    return int(np.argmax(probs)), probs


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _accuracy(params, config, seq, labels):
    probs, _ = decoder_forward_batch(params, config, seq, train_mode=False)
    return float((probs.argmax(axis=1) == labels).mean())


def decoder_train(config: DecoderConfig, dataset: Dataset) -> DecoderModel:
    """Train on the dataset's training split; deterministic given the seed."""
    rng = RngStream(config.seed, ("decoder",))
    selection = select_voxels(dataset.train, config.voxels_per_node)

    samples = dataset.train
    n_val = int(round(config.validation_fraction * len(samples)))
    if n_val:
        perm = rng.child("split").permutation(len(samples))
        val = [samples[i] for i in perm[:n_val]]
        samples = [samples[i] for i in perm[n_val:]]
    else:
        val = []

    def to_arrays(group):
        seq = np.stack([
            np.stack([_sequence_from_record(s.voxels, selection)[t]
                      for s in group])
            for t in range(len(ROI_NAMES))])
        labels = np.array([s.label for s in group])
        return seq, labels

    seq_all, labels_all = to_arrays(samples)
    val_arrays = to_arrays(val) if val else None

    params = init_decoder_params(config, rng.child("init"))
    opt = Optimizer(OptimizerConfig(kind="adam", lr=config.lr))
    model = DecoderModel(config, params, selection)
    n = len(samples)
    for epoch in range(config.epochs):
        erng = rng.child("epoch", epoch)
        perm = erng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            seq = seq_all[:, idx]
            labels = labels_all[idx]
            params.zero_grads()
            probs, cache = decoder_forward_batch(
                params, config, seq, train_mode=True,
                rng=erng.child("dropout", start))
            decoder_backward_batch(params, config, cache, labels)
            p = np.clip(probs[np.arange(len(idx)), labels], 1e-300, None)
            total_loss += float(-np.log(p).sum())
            opt.step(params)
        entry = {
            "epoch": epoch,
            "loss": total_loss / n,
            "train_accuracy": _accuracy(params, config, seq_all, labels_all),
        }
        if val_arrays:
            entry["val_accuracy"] = _accuracy(params, config, *val_arrays)
        model.history.append(entry)
    return model


# --------------------------------------------------------------------------
# Coarse -> fine sampling
# --------------------------------------------------------------------------

def map_to_fine(coarse_label: int, category_map: CategoryMap, rng: RngStream):
    """Infinite stream of uniform i.i.d. fine categories for a coarse label."""
    fine_set = category_map.sets[coarse_label]
    while True:
        yield fine_set[int(rng.integers(0, len(fine_set)))]


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _model_dict(model: DecoderModel) -> dict:
    return {
        "config": {k: getattr(model.config, k) for k in (
            "voxels_per_node", "hidden_per_direction", "n_classes",
            "dropout_rate", "epochs", "lr", "batch_size",
            "validation_fraction", "seed")},
        "selection": model.selection,
        "params": {name: {"shape": list(p.value.shape),
                          "values": p.value.ravel().tolist()}
                   for name, p in model.params.items()},
        "history": model.history,
    }


def save_decoder(model: DecoderModel, path: str) -> None:
    d = _model_dict(model)
    blob = json.dumps(d, sort_keys=True)
    d["content_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    with open(path, "w") as f:
        json.dump(d, f, sort_keys=True)


def load_decoder(path: str) -> DecoderModel:
    with open(path) as f:
        d = json.load(f)
    config = DecoderConfig(**d["config"])
    params = ParamSet()
    for name, entry in sorted(d["params"].items()):
        params.add(name, np.array(entry["values"]).reshape(entry["shape"]))
    return DecoderModel(config, params,
                        {k: list(v) for k, v in d["selection"].items()},
                        d.get("history", []))
