"""ROI-wise convolutional encoding models for V1, V2, V3: two stride-2 conv
stages (3x3 kernels for V1/V2, 5x5 for V3) with ReLU, then one linear
feature-to-voxel map.  Trained end-to-end with a weighted negative Pearson
correlation loss, input-noise regularization, and per-voxel weights that
re-adapt each epoch toward the voxels that encode well.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import (Optimizer, OptimizerConfig, ParamSet, RngStream,
                       conv2d_batch, conv2d_batch_backward, pearson_columns,
                       relu)
from .data import Dataset, ENCODED_ROIS

DEFAULT_KERNELS = {"V1": 3, "V2": 3, "V3": 5}


@dataclass
class EncoderConfig:
    kernels: dict = field(default_factory=lambda: dict(DEFAULT_KERNELS))
    channels: int = 8
    stages: int = 2
    epochs: int = 50
    lr: float = 2e-3
    batch_size: int = 32
    input_noise_std: float = 0.02
    weight_floor: float = 1e-3       # epsilon added to rectified correlations
    seed: int = 0

    def __post_init__(self):
        if set(self.kernels) != set(ENCODED_ROIS):
            raise ValueError("encoder config must cover exactly ROIs %s"
                             % (ENCODED_ROIS,))
        for roi, k in self.kernels.items():
            if k % 2 == 0:
                raise ValueError("kernel size for %s must be odd" % roi)


@dataclass
class RoiModel:
    roi: str
    kernel: int
    params: ParamSet
    resolution: int
    n_voxels: int
    train_corr: np.ndarray = None     # per-voxel r-hat on the training set
    weights: np.ndarray = None        # per-voxel loss weights, sum 1

    def feature_dim(self, channels: int, stages: int) -> int:
        return (self.resolution // (2 ** stages)) ** 2 * channels


@dataclass
class EncoderModel:
    config: EncoderConfig
    rois: dict[str, RoiModel]
    history: list[dict] = field(default_factory=list)

    @property
    def resolution(self) -> int:
        return next(iter(self.rois.values())).resolution


def init_roi_params(roi: str, kernel: int, resolution: int, n_voxels: int,
                    channels: int, stages: int, rng: RngStream) -> ParamSet:
    params = ParamSet()
    cin = 1
    for s in range(stages):
        r = rng.child("conv", s)
        fan_in = kernel * kernel * cin
        params.add("conv%d.k" % s,
                   r.normal((kernel, kernel, cin, channels)) / np.sqrt(fan_in))
        params.add("conv%d.b" % s, np.zeros(channels))
        cin = channels
    feat = (resolution // (2 ** stages)) ** 2 * channels
    r = rng.child("fc")
    params.add("fc.w", r.normal((feat, n_voxels)) / np.sqrt(feat))
    params.add("fc.b", np.zeros(n_voxels))
    return params


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------

def roi_forward(model: RoiModel, images: np.ndarray, config: EncoderConfig,
                want_features: bool = False):
    """images: (B, H, W) -> predictions (B, n_voxels) and a backward cache."""
    if images.shape[1] != model.resolution or images.shape[2] != model.resolution:
        raise ValueError("encoder %s: expected %dx%d input, got %s"
                         % (model.roi, model.resolution, model.resolution,
                            images.shape[1:]))
    x = images[..., None]
    caches = []
    features = []
    for s in range(config.stages):
        k = model.params["conv%d.k" % s].value
        b = model.params["conv%d.b" % s].value
        pre, conv_cache = conv2d_batch(x, k, padding="same", stride=2)
        pre = pre + b
        x = relu(pre)
        caches.append((conv_cache, pre > 0))
        if want_features:
            features.append(x)
    flat = x.reshape(x.shape[0], -1)
    pred = flat @ model.params["fc.w"].value + model.params["fc.b"].value
    cache = (caches, flat, x.shape)
    if want_features:
        return pred, cache, features
    return pred, cache


def roi_backward(model: RoiModel, dpred: np.ndarray, cache,
                 config: EncoderConfig) -> None:
    caches, flat, last_shape = cache
    model.params["fc.w"].grad += flat.T @ dpred
    model.params["fc.b"].grad += dpred.sum(axis=0)
    dx = (dpred @ model.params["fc.w"].value.T).reshape(last_shape)
    for s in reversed(range(config.stages)):
        conv_cache, relu_mask = caches[s]
        dpre = dx * relu_mask
        model.params["conv%d.b" % s].grad += dpre.sum(axis=(0, 1, 2))
        dx, dk = conv2d_batch_backward(dpre, conv_cache)
        model.params["conv%d.k" % s].grad += dk


def encode(model: EncoderModel, image: np.ndarray) -> dict[str, np.ndarray]:
    """Predict V1-V3 voxels for one preprocessed image."""
    return {roi: out[0] for roi, out in
            encode_batch(model, image[None]).items()}


def encode_batch(model: EncoderModel, images: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    for roi in ENCODED_ROIS:
        pred, _ = roi_forward(model.rois[roi], images, model.config)
        out[roi] = pred
    return out


def encoder_features(model: EncoderModel, image: np.ndarray) -> list[np.ndarray]:
    """Conv-stage activations for one image, ROI-major then stage order."""
    feats = []
    for roi in ENCODED_ROIS:
        _, _, stage_feats = roi_forward(model.rois[roi], image[None],
                                        model.config, want_features=True)
        feats.extend(f[0] for f in stage_feats)
    return feats


# --------------------------------------------------------------------------
# Weighted correlation loss
# --------------------------------------------------------------------------

def batch_pc_loss(pred: np.ndarray, true: np.ndarray, weights: np.ndarray):
    """loss = -sum_i w_i * PC(pred[:, i], true[:, i]); returns (loss, dpred).

    Degenerate voxels (zero variance in either column) contribute nothing
    to the loss or the gradient.  Needs a batch of at least 2.
    """
    if pred.shape[0] < 2:
        raise ValueError("batch_pc_loss: need batch size >= 2")
    if pred.shape != true.shape:
        raise ValueError("batch_pc_loss: shape mismatch %s vs %s"
                         % (pred.shape, true.shape))
    b = pred.shape[0]
    pc = pred - pred.mean(axis=0)
    tc = true - true.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    st = np.sqrt((tc * tc).sum(axis=0))
    ok = (sp > 0) & (st > 0)
    r = np.zeros(pred.shape[1])
    r[ok] = (pc * tc).sum(axis=0)[ok] / (sp * st)[ok]
    loss = float(-(weights * r).sum())
    # d r_i / d pred_cent = t_hat / (sp st) - r * p_cent / sp^2 ; then center
    dpred = np.zeros_like(pred)
    sp_safe = np.where(ok, sp, 1.0)
    st_safe = np.where(ok, st, 1.0)
    g = tc / (sp_safe * st_safe) - r * pc / (sp_safe ** 2)
    g[:, ~ok] = 0.0
    g *= -weights
    dpred = g - g.mean(axis=0)
    return loss, dpred


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _train_correlations(model: RoiModel, images: np.ndarray, true: np.ndarray,
                        config: EncoderConfig, batch: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, images.shape[0], batch):
        p, _ = roi_forward(model, images[start:start + batch], config)
        preds.append(p)
    r, _ = pearson_columns(np.concatenate(preds), true)
    return r


def _adapt_weights(r: np.ndarray, floor: float) -> np.ndarray:
    w = np.maximum(r, 0.0) + floor
    return w / w.sum()


def encoder_train(config: EncoderConfig, dataset: Dataset) -> EncoderModel:
    """Jointly train all three ROI models; deterministic given the seed.

    Each step adds Gaussian pixel noise to the inputs; after each epoch the
    per-voxel weights are recomputed from the rectified training
    correlations so optimization concentrates on encodable voxels.
    """
    rng = RngStream(config.seed, ("encoder",))
    resolution = dataset.resolution
    images = np.stack([s.image for s in dataset.train])
    true = {roi: np.stack([s.voxels.rois[roi] for s in dataset.train])
            for roi in ENCODED_ROIS}

    rois = {}
    opts = {}
    for roi in ENCODED_ROIS:
        n_vox = true[roi].shape[1]
        params = init_roi_params(roi, config.kernels[roi], resolution, n_vox,
                                 config.channels, config.stages,
                                 rng.child("init", roi))
        m = RoiModel(roi, config.kernels[roi], params, resolution, n_vox)
        m.weights = np.full(n_vox, 1.0 / n_vox)
        rois[roi] = m
        opts[roi] = Optimizer(OptimizerConfig(kind="adam", lr=config.lr))
    model = EncoderModel(config, rois)

    n = images.shape[0]
    for epoch in range(config.epochs):
        erng = rng.child("epoch", epoch)
        perm = erng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if idx.size < 2:
                continue
            batch = images[idx]
            if config.input_noise_std > 0:
                batch = batch + erng.child("noise", start).normal(
                    batch.shape) * config.input_noise_std
            for roi in ENCODED_ROIS:
                m = rois[roi]
                m.params.zero_grads()
                pred, cache = roi_forward(m, batch, config)
                _, dpred = batch_pc_loss(pred, true[roi][idx], m.weights)
                roi_backward(m, dpred, cache, config)
                opts[roi].step(m.params)
        entry = {"epoch": epoch}
        for roi in ENCODED_ROIS:
            m = rois[roi]
            m.train_corr = _train_correlations(m, images, true[roi], config)
            m.weights = _adapt_weights(m.train_corr, config.weight_floor)
            entry["mean_pc_%s" % roi] = float(m.train_corr.mean())
        entry["mean_pc"] = float(np.mean([entry["mean_pc_%s" % r]
                                          for r in ENCODED_ROIS]))
        model.history.append(entry)
    return model


def voxelwise_training_corr(model: EncoderModel,
                            dataset: Dataset) -> dict[str, np.ndarray]:
    """Per-voxel Pearson across the training samples, per ROI."""
    images = np.stack([s.image for s in dataset.train])
    out = {}
    for roi in ENCODED_ROIS:
        true = np.stack([s.voxels.rois[roi] for s in dataset.train])
        out[roi] = _train_correlations(model.rois[roi], images, true,
                                       model.config)
    return out


def heldout_mean_pc(model: EncoderModel, dataset: Dataset) -> float:
    """Mean per-voxel test-set correlation over V1-V3."""
    images = np.stack([s.image for s in dataset.test])
    vals = []
    for roi in ENCODED_ROIS:
        true = np.stack([s.voxels.rois[roi] for s in dataset.test])
        r = _train_correlations(model.rois[roi], images, true, model.config)
        vals.append(r.mean())
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _model_dict(model: EncoderModel) -> dict:
    return {
        "config": {
            "kernels": model.config.kernels,
            "channels": model.config.channels,
            "stages": model.config.stages,
            "epochs": model.config.epochs,
            "lr": model.config.lr,
            "batch_size": model.config.batch_size,
            "input_noise_std": model.config.input_noise_std,
            "weight_floor": model.config.weight_floor,
            "seed": model.config.seed,
        },
        "rois": {
            roi: {
                "kernel": m.kernel,
                "resolution": m.resolution,
                "n_voxels": m.n_voxels,
                "train_corr": None if m.train_corr is None else m.train_corr.tolist(),
                "weights": None if m.weights is None else m.weights.tolist(),
                "params": {name: {"shape": list(p.value.shape),
                                  "values": p.value.ravel().tolist()}
                           for name, p in m.params.items()},
            } for roi, m in model.rois.items()
        },
        "history": model.history,
    }


def save_encoder(model: EncoderModel, path: str) -> None:
    d = _model_dict(model)
    blob = json.dumps(d, sort_keys=True)
    d["content_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    with open(path, "w") as f:
        json.dump(d, f, sort_keys=True)


def load_encoder(path: str) -> EncoderModel:
    with open(path) as f:
        d = json.load(f)
    config = EncoderConfig(**d["config"])
    rois = {}
    for roi, entry in d["rois"].items():
        params = ParamSet()
        for name, p in sorted(entry["params"].items()):
            params.add(name, np.array(p["values"]).reshape(p["shape"]))
        m = RoiModel(roi, entry["kernel"], params, entry["resolution"],
                     entry["n_voxels"])
        if entry["train_corr"] is not None:
            m.train_corr = np.array(entry["train_corr"])
        if entry["weights"] is not None:
            m.weights = np.array(entry["weights"])
        rois[roi] = m
    return EncoderModel(config, rois, d.get("history", []))
