"""Stimulus/voxel domain types, image preprocessing (grayscale + circular
mask), dataset directory I/O, and the seeded synthetic-world factory.

Dataset directory layout:
    stimuli/<id>.pgm        16-bit binary PGM (P5), grayscale in [0,1]
    voxels_<ROI>.csv        columns: id, v0..v{n-1}
    labels.csv              columns: id, coarse_label
    meta.json               resolution, ROI sizes, seed, noise_std, ...
    truth.json              hidden world truth (synthetic only; never read
                            by training or reconstruction code paths)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream

ROI_NAMES = ("V1", "V2", "V3", "V4", "LO")
ENCODED_ROIS = ("V1", "V2", "V3")

# Coarse-category fine-set sizes (10 groups over 1000 fine categories).
COARSE_SET_SIZES = (11, 43, 219, 171, 402, 54, 41, 35, 12, 12)

N_COARSE = 10

# BT.601 luma coefficients.
_LUMA = np.array([0.299, 0.587, 0.114])


class DataError(Exception):
    """Missing/corrupt dataset files or inconsistent records."""


# --------------------------------------------------------------------------
# Images
# --------------------------------------------------------------------------

def to_grayscale(img: np.ndarray) -> np.ndarray:
    """RGB (H, W, 3) in [0,1] -> luma (H, W) in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img.copy()
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("to_grayscale: expected (H, W, 3), got %s" % (img.shape,))
    return np.clip(img @ _LUMA, 0.0, 1.0)


def apply_circular_mask(img: np.ndarray, radius_fraction: float = 1.0,
                        background: float = 0.5) -> np.ndarray:
    """Keep pixels within radius_fraction of the inradius; rest -> background."""
    if not (0.0 < radius_fraction <= 1.0):
        raise ValueError("apply_circular_mask: radius_fraction must be in (0, 1]")
    if not (0.0 <= background <= 1.0):
        raise ValueError("apply_circular_mask: background must be in [0, 1]")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    radius = radius_fraction * min(h, w) / 2.0
    out = np.where(dist <= radius, img, background)
    return out


def preprocess(rgb: np.ndarray, radius_fraction: float = 1.0,
               background: float = 0.5) -> np.ndarray:
    """Generator output -> stimulus pattern: grayscale then circular mask."""
    return apply_circular_mask(to_grayscale(rgb), radius_fraction, background)


# --------------------------------------------------------------------------
# PGM (P5, 16-bit) round trip
# --------------------------------------------------------------------------

_PGM_MAX = 65535


def save_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    q = np.round(np.clip(img, 0.0, 1.0) * _PGM_MAX).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (w, h, _PGM_MAX))
        f.write(q.tobytes())


def load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    try:
        fields = []
        pos = 0
        while len(fields) < 4:
            nl = data.index(b"\n", pos)
            line = data[pos:nl]
            pos = nl + 1
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        if magic != b"P5" or maxval != _PGM_MAX:
            raise ValueError
        raw = np.frombuffer(data[pos:], dtype=">u2")
        if raw.size != w * h:
            raise ValueError
    except (ValueError, IndexError):
        raise DataError("corrupt PGM file: %s" % path)
    return raw.reshape(h, w).astype(np.float64) / _PGM_MAX


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------

@dataclass
class VoxelRecord:
    """Per-ROI response vectors for the five visual areas."""
    rois: dict[str, np.ndarray]

    def __post_init__(self):
        if tuple(self.rois) != ROI_NAMES:
            raise ValueError("VoxelRecord must hold exactly ROIs %s in order, got %s"
                             % (ROI_NAMES, tuple(self.rois)))
        self.rois = {k: np.asarray(v, dtype=np.float64) for k, v in self.rois.items()}

    def concat(self, names=ROI_NAMES) -> np.ndarray:
        return np.concatenate([self.rois[n] for n in names])


@dataclass
class Sample:
    id: str
    image: np.ndarray           # (H, W) grayscale in [0,1]
    voxels: VoxelRecord
    label: int                  # coarse category 0..9

    def __post_init__(self):
        if not (0 <= self.label < N_COARSE):
            raise ValueError("Sample %s: label %d out of range" % (self.id, self.label))


@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    meta: dict

    @property
    def roi_sizes(self) -> dict[str, int]:
        return {k: int(v) for k, v in self.meta["roi_sizes"].items()}

    @property
    def resolution(self) -> int:
        return int(self.meta["resolution"])

    def all_samples(self) -> list[Sample]:
        return self.train + self.test


# --------------------------------------------------------------------------
# Category map (coarse -> fine sets)
# --------------------------------------------------------------------------

class CategoryMap:
    """10 coarse categories, each a non-empty set of fine-category indices."""

    def __init__(self, sets: list[list[int]], n_fine: int = 1000):
        if len(sets) != N_COARSE:
            raise DataError("CategoryMap needs exactly %d entries, got %d"
                            % (N_COARSE, len(sets)))
        self.sets = []
        for i, s in enumerate(sets):
            s = sorted(int(v) for v in s)
            if not s:
                raise DataError("CategoryMap entry %d is empty" % i)
            if s[0] < 0 or s[-1] >= n_fine:
                raise DataError("CategoryMap entry %d has fine index out of range" % i)
            self.sets.append(s)
        self.n_fine = n_fine

    @classmethod
    def default(cls) -> "CategoryMap":
        """Contiguous partition of 0..999 with the shipped group sizes."""
        sets, start = [], 0
        for size in COARSE_SET_SIZES:
            sets.append(list(range(start, start + size)))
            start += size
        return cls(sets)

    @classmethod
    def load(cls, path: str) -> "CategoryMap":
        try:
            with open(path) as f:
                sets = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError("cannot read category map %s: %s" % (path, e))
        return cls(sets)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.sets, f)

    def coarse_of(self, fine: int) -> int:
        for i, s in enumerate(self.sets):
            if fine in s:
                return i
        raise DataError("fine category %d not in map" % fine)


# --------------------------------------------------------------------------
# Z-scoring
# --------------------------------------------------------------------------

def zscore_fit_apply(train_records: list[VoxelRecord],
                     other_records: list[VoxelRecord]):
    """Fit per-voxel (mu, sigma) on the training set, apply to all records.

    Population sigma.  Constant voxels (sigma == 0) are flagged and mapped
    to 0.  Returns (train_out, other_out, stats) where stats maps ROI ->
    (mu, sigma, constant_mask).
    """
    if not train_records:
        raise ValueError("zscore_fit_apply: empty training set")
    stats = {}
    for roi in ROI_NAMES:
        mat = np.stack([r.rois[roi] for r in train_records])
        mu = mat.mean(axis=0)
        sigma = mat.std(axis=0)
        constant = sigma == 0.0
        stats[roi] = (mu, sigma, constant)

    def apply(records):
        out = []
        for r in records:
            rois = {}
            for roi in ROI_NAMES:
                mu, sigma, constant = stats[roi]
                v = np.where(constant, 0.0, (r.rois[roi] - mu) /
                             np.where(constant, 1.0, sigma))
                rois[roi] = v
            out.append(VoxelRecord(rois))
        return out

    return apply(train_records), apply(other_records), stats


def zscore_dataset(ds: Dataset) -> Dataset:
    """Return a dataset with voxels z-scored on training statistics."""
    train_v, test_v, _ = zscore_fit_apply([s.voxels for s in ds.train],
                                          [s.voxels for s in ds.test])
    train = [Sample(s.id, s.image, v, s.label) for s, v in zip(ds.train, train_v)]
    test = [Sample(s.id, s.image, v, s.label) for s, v in zip(ds.test, test_v)]
    meta = dict(ds.meta)
    meta["zscored"] = True
    return Dataset(train, test, meta)


# --------------------------------------------------------------------------
# Dataset I/O
# --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def save_dataset(ds: Dataset, directory: str) -> None:
    os.makedirs(os.path.join(directory, "stimuli"), exist_ok=True)
    samples = ds.all_samples()
    for s in samples:
        save_pgm(os.path.join(directory, "stimuli", "%s.pgm" % s.id), s.image)
    for roi in ROI_NAMES:
        n = samples[0].voxels.rois[roi].size
        with open(os.path.join(directory, "voxels_%s.csv" % roi), "w") as f:
            f.write("id," + ",".join("v%d" % i for i in range(n)) + "\n")
            for s in samples:
                v = s.voxels.rois[roi]
                if v.size != n:
                    raise DataError("ROI %s length mismatch at sample %s" % (roi, s.id))
                f.write(s.id + "," + ",".join(_fmt(x) for x in v) + "\n")
    with open(os.path.join(directory, "labels.csv"), "w") as f:
        f.write("id,coarse_label\n")
        for s in samples:
            f.write("%s,%d\n" % (s.id, s.label))
    meta = dict(ds.meta)
    meta["n_train"] = len(ds.train)
    meta["n_test"] = len(ds.test)
    meta["train_ids"] = [s.id for s in ds.train]
    meta["test_ids"] = [s.id for s in ds.test]
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_dataset(directory: str) -> Dataset:
    meta_path = os.path.join(directory, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except OSError:
        raise DataError("missing dataset metadata: %s" % meta_path)

    labels = {}
    labels_path = os.path.join(directory, "labels.csv")
    try:
        with open(labels_path) as f:
            header = f.readline()
            if header.strip() != "id,coarse_label":
                raise DataError("bad header in %s" % labels_path)
            for line in f:
                sid, lab = line.strip().split(",")
                labels[sid] = int(lab)
    except OSError:
        raise DataError("missing labels file: %s" % labels_path)

    voxels: dict[str, dict[str, np.ndarray]] = {}
    roi_len = {}
    for roi in ROI_NAMES:
        path = os.path.join(directory, "voxels_%s.csv" % roi)
        try:
            with open(path) as f:
                f.readline()
                rows = {}
                for line in f:
                    parts = line.rstrip("\n").split(",")
                    vec = np.array([float(x) for x in parts[1:]])
                    if roi in roi_len and roi_len[roi] != vec.size:
                        raise DataError("ROI %s length mismatch at sample %s in %s"
                                        % (roi, parts[0], path))
                    roi_len.setdefault(roi, vec.size)
                    rows[parts[0]] = vec
        except OSError:
            raise DataError("missing voxel file: %s" % path)
        voxels[roi] = rows

    def build(ids):
        out = []
        for sid in ids:
            img_path = os.path.join(directory, "stimuli", "%s.pgm" % sid)
            if not os.path.exists(img_path):
                raise DataError("sample %s: missing image file %s" % (sid, img_path))
            if sid not in labels:
                raise DataError("sample %s: missing label" % sid)
            for roi in ROI_NAMES:
                if sid not in voxels[roi]:
                    raise DataError("sample %s: missing %s voxels" % (sid, roi))
            rec = VoxelRecord({roi: voxels[roi][sid] for roi in ROI_NAMES})
            out.append(Sample(sid, load_pgm(img_path), rec, labels[sid]))
        return out

    return Dataset(build(meta["train_ids"]), build(meta["test_ids"]), meta)


# --------------------------------------------------------------------------
# Hidden true encoder + synthetic world
# --------------------------------------------------------------------------

@dataclass
class WorldConfig:
    n_train: int = 400
    n_test: int = 20
    voxels_per_roi: int = 120
    noise_std: float = 1.0
    resolution: int = 64
    mask_radius: float = 1.0
    category_strength: float = 2.0   # coarse-category signal mixed into V4/LO


@dataclass
class WorldTruth:
    """Hidden ground truth of a synthetic world; verification oracle only."""
    encoder_params: dict                      # hidden true-encoder parameters
    signal_mu: dict[str, np.ndarray]          # per-voxel standardization
    signal_sigma: dict[str, np.ndarray]
    test_truth: list[dict]                    # per test sample: id, fine, latent
    noise_std: float
    seed: int


class TrueEncoder:
    """Random fixed conv+linear map from images to voxels, one per ROI.

    V1-V3 use the same architecture family as the trainable encoder (conv
    stages with ReLU, then a linear readout).  V4/LO use a linear map on a
    downsampled image plus a coarse-category component, which is what gives
    the category decoder its signal.
    """

    KERNELS = {"V1": 3, "V2": 3, "V3": 5}
    CHANNELS = 8

    def __init__(self, seed: int, resolution: int, voxels_per_roi: int,
                 category_strength: float = 2.0):
        from .numerics import conv2d_batch, relu  # noqa: F401 (used in encode)
        self.resolution = resolution
        self.voxels_per_roi = voxels_per_roi
        self.category_strength = category_strength
        self.seed = seed
        rng = RngStream(seed, ("world", "true-encoder"))
        self.params = {}
        for roi in ENCODED_ROIS:
            k = self.KERNELS[roi]
            r = rng.child(roi)
            feat = (resolution // 4) ** 2 * self.CHANNELS
            self.params[roi] = {
                "k1": r.normal((k, k, 1, self.CHANNELS)) * (1.5 / k),
                "b1": r.normal(self.CHANNELS) * 0.1,
                "k2": r.normal((k, k, self.CHANNELS, self.CHANNELS)) * (0.8 / k),
                "b2": r.normal(self.CHANNELS) * 0.1,
                "w": r.normal((feat, voxels_per_roi)) / np.sqrt(feat),
                "b": r.normal(voxels_per_roi) * 0.05,
            }
        for roi in ("V4", "LO"):
            r = rng.child(roi)
            small = resolution // 4
            self.params[roi] = {
                "w": r.normal((small * small, voxels_per_roi)) / small,
                "b": r.normal(voxels_per_roi) * 0.05,
                "cat": r.normal((N_COARSE, voxels_per_roi)),
            }

    def encode_batch(self, images: np.ndarray, labels=None) -> dict[str, np.ndarray]:
        """images: (B, H, W) -> dict ROI -> (B, n_vox)."""
        from .numerics import conv2d_batch, relu
        x = images[..., None]
        out = {}
        for roi in ENCODED_ROIS:
            p = self.params[roi]
            h1, _ = conv2d_batch(x, p["k1"], padding="same", stride=2)
            h1 = relu(h1 + p["b1"])
            h2, _ = conv2d_batch(h1, p["k2"], padding="same", stride=2)
            h2 = relu(h2 + p["b2"])
            out[roi] = h2.reshape(h2.shape[0], -1) @ p["w"] + p["b"]
        small = images[:, ::4, ::4].reshape(images.shape[0], -1)
        for roi in ("V4", "LO"):
            p = self.params[roi]
            v = small @ p["w"] + p["b"]
            if labels is not None:
                v = v + self.category_strength * p["cat"][np.asarray(labels)]
            out[roi] = v
        return out

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "resolution": self.resolution,
            "voxels_per_roi": self.voxels_per_roi,
            "category_strength": self.category_strength,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrueEncoder":
        return cls(d["seed"], d["resolution"], d["voxels_per_roi"],
                   d["category_strength"])


def make_world(seed: int, cfg: WorldConfig, generator,
               category_map: CategoryMap | None = None):
    """Build a synthetic (Dataset, WorldTruth) pair.

    Each sample draws a coarse label, a fine category from its set, and a
    latent; the stimulus is the preprocessed generator image and the voxels
    are the hidden encoder's standardized output plus Gaussian noise.  The
    per-voxel signal is standardized on the training portion, so the
    per-voxel SNR is 1 / noise_std**2.
    """
    if category_map is None:
        category_map = CategoryMap.default()
    true_enc = TrueEncoder(seed, cfg.resolution, cfg.voxels_per_roi,
                           cfg.category_strength)
    rng = RngStream(seed, ("world",))
    n = cfg.n_train + cfg.n_test
    draws = rng.child("draws")
    labels = draws.integers(0, N_COARSE, n)
    fines = np.array([category_map.sets[l][draws.integers(0, len(category_map.sets[l]))]
                      for l in labels])
    latents = np.stack([generator.sample_latent(draws.child("z", i))
                        for i in range(n)])
    images = np.stack([
        preprocess(generator.generate(int(fines[i]), latents[i]), cfg.mask_radius)
        for i in range(n)
    ])

    signals = true_enc.encode_batch(images, labels)
    mu, sigma = {}, {}
    for roi in ROI_NAMES:
        m = signals[roi][:cfg.n_train].mean(axis=0)
        s = signals[roi][:cfg.n_train].std(axis=0)
        s = np.where(s == 0.0, 1.0, s)
        mu[roi], sigma[roi] = m, s
        signals[roi] = (signals[roi] - m) / s

    noise = rng.child("noise")
    samples = []
    for i in range(n):
        rois = {}
        for roi in ROI_NAMES:
            v = signals[roi][i]
            if cfg.noise_std > 0:
                v = v + noise.child(str(i), roi).normal(v.size) * cfg.noise_std
            rois[roi] = v
        samples.append(Sample("s%04d" % i, images[i], VoxelRecord(rois),
                              int(labels[i])))

    meta = {
        "resolution": cfg.resolution,
        "roi_sizes": {roi: cfg.voxels_per_roi for roi in ROI_NAMES},
        "seed": seed,
        "noise_std": cfg.noise_std,
        "mask_radius": cfg.mask_radius,
        "generator": generator.config_json(),
    }
    ds = Dataset(samples[:cfg.n_train], samples[cfg.n_train:], meta)
    truth = WorldTruth(
        encoder_params=true_enc.to_json(),
        signal_mu=mu,
        signal_sigma=sigma,
        test_truth=[{"id": samples[cfg.n_train + j].id,
                     "fine": int(fines[cfg.n_train + j]),
                     "latent": latents[cfg.n_train + j].tolist()}
                    for j in range(cfg.n_test)],
        noise_std=cfg.noise_std,
        seed=seed,
    )
    return ds, truth


def save_truth(truth: WorldTruth, directory: str) -> None:
    d = {
        "encoder_params": truth.encoder_params,
        "signal_mu": {k: v.tolist() for k, v in truth.signal_mu.items()},
        "signal_sigma": {k: v.tolist() for k, v in truth.signal_sigma.items()},
        "test_truth": truth.test_truth,
        "noise_std": truth.noise_std,
        "seed": truth.seed,
    }
    with open(os.path.join(directory, "truth.json"), "w") as f:
        json.dump(d, f, sort_keys=True)


def load_truth(directory: str) -> WorldTruth:
    path = os.path.join(directory, "truth.json")
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError:
        raise DataError("missing truth file: %s" % path)
    return WorldTruth(
        encoder_params=d["encoder_params"],
        signal_mu={k: np.array(v) for k, v in d["signal_mu"].items()},
        signal_sigma={k: np.array(v) for k, v in d["signal_sigma"].items()},
        test_truth=d["test_truth"],
        noise_std=d["noise_std"],
        seed=d["seed"],
    )
