"""Conditional image generator contract: 120-D Gaussian latent chunked
6 x 20, per-stage class-conditioned modulation, category embedding,
truncation by resampling, fixed power-of-two resolution.

The implementation is a deterministic synthetic generator standing in for
pre-trained GAN weights; it preserves the interface facts the search,
encoder, and evaluator depend on while remaining seed-reproducible.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, sigmoid
from . import data as datamod

LATENT_DIM = 120
N_CHUNKS = 6
CHUNK = LATENT_DIM // N_CHUNKS
EMBED_DIM = 64
_SINUSOIDS = 3


@dataclass
class GeneratorConfig:
    n_fine_categories: int = 1000
    resolution: int = 64
    truncation: float | None = None    # None = no truncation
    seed: int = 0

    def __post_init__(self):
        s = self.resolution
        if s < 16 or (s & (s - 1)) != 0:
            raise ValueError("resolution must be a power of two >= 16")
        if self.truncation is not None and self.truncation <= 0:
            raise ValueError("truncation must be positive")


def sample_latent(rng: RngStream, truncation: float | None = None) -> np.ndarray:
    """i.i.d. standard-normal 120-vector; |z| > truncation entries redrawn."""
    z = rng.normal(LATENT_DIM)
    if truncation is not None:
        bad = np.abs(z) > truncation
        while bad.any():
            z[bad] = rng.normal(int(bad.sum()))
            bad = np.abs(z) > truncation
    return z


def chunks(z: np.ndarray) -> list[np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (LATENT_DIM,):
        raise ValueError("latent must have exactly %d entries" % LATENT_DIM)
    return [z[CHUNK * k:CHUNK * (k + 1)] for k in range(N_CHUNKS)]


def _bilinear_up2(field: np.ndarray) -> np.ndarray:
    """2x bilinear upsample of a square grid (align corners, edge clamp)."""
    n = field.shape[0]
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.clip(np.floor(src).astype(int), 0, n - 1)
    i1 = np.clip(i0 + 1, 0, n - 1)
    w = np.clip(src - i0, 0.0, 1.0)
    rows = field[i0] * (1 - w)[:, None] + field[i1] * w[:, None]
    out = rows[:, i0] * (1 - w)[None, :] + rows[:, i1] * w[None, :]
    return out


class SyntheticGenerator:
    """Seeded parameter bank mapping (fine category, latent) -> RGB image.

    Pipeline: an 8x8 base grid from an affine map of (chunk 1 + category
    embedding); then per stage a 2x bilinear upsample plus smooth oriented
    sinusoidal modulations whose orientation / frequency / phase / amplitude
    are affine in (chunk k + embedding); finally a pixelwise sigmoid and a
    category-derived 3-channel tint.  Purely functional: no mutable state.
    """

    def __init__(self, config: GeneratorConfig):
        self.config = config
        n_stages = int(math.log2(config.resolution // 8))
        if n_stages + 1 > N_CHUNKS:
            raise ValueError("resolution too large for %d latent chunks" % N_CHUNKS)
        self.n_stages = n_stages
        rng = RngStream(config.seed, ("generator",))
        d = CHUNK + EMBED_DIM
        self.embeddings = rng.child("embed").normal((config.n_fine_categories,
                                                     EMBED_DIM))
        r = rng.child("base")
        self.w_base = r.normal((d, 64)) / np.sqrt(d)
        self.b_base = r.normal(64) * 0.1
        self.stage_maps = []
        for k in range(n_stages):
            r = rng.child("stage", k)
            self.stage_maps.append((
                r.normal((d, 4 * _SINUSOIDS)) / np.sqrt(d),
                r.normal(4 * _SINUSOIDS) * 0.1,
            ))
        r = rng.child("tint")
        self.w_tint = r.normal((EMBED_DIM, 6)) / np.sqrt(EMBED_DIM)

    def sample_latent(self, rng: RngStream) -> np.ndarray:
        return sample_latent(rng, self.config.truncation)

    def generate(self, category: int, z: np.ndarray) -> np.ndarray:
        """Render one (S, S, 3) RGB image in [0,1]; deterministic."""
        cfg = self.config
        if not (0 <= category < cfg.n_fine_categories):
            raise ValueError("category %d out of range [0, %d)"
                             % (category, cfg.n_fine_categories))
        zc = [0.7 * c for c in chunks(z)]
        e = self.embeddings[category]
        ec = 2.5 * e    # embedding outweighs a single chunk: keeps categories separable
        v = np.concatenate([zc[0], ec])
        field = np.tanh(v @ self.w_base + self.b_base).reshape(8, 8) * 2.0
        size = 8
        for k in range(self.n_stages):
            field = _bilinear_up2(field)
            size *= 2
            w, b = self.stage_maps[k]
            p = (np.concatenate([zc[k + 1], ec]) @ w + b).reshape(_SINUSOIDS, 4)
            coords = (np.arange(size) + 0.5) / size
            yy, xx = np.meshgrid(coords, coords, indexing="ij")
            for theta_raw, freq_raw, phase_raw, amp_raw in p:
                theta = math.pi * math.tanh(theta_raw)
                freq = 2.0 + 4.0 * sigmoid(np.array(freq_raw))
                amp = 0.5 * math.tanh(amp_raw)
                field = field + amp * np.sin(
                    2.0 * math.pi * freq * (xx * math.cos(theta) +
                                            yy * math.sin(theta)) + phase_raw)
        gains = e @ self.w_tint
        scale = 1.0 + 0.3 * np.tanh(gains[:3])
        shift = 0.8 * np.tanh(gains[3:])
        rgb = sigmoid(field[:, :, None] * scale[None, None, :] +
                      shift[None, None, :])
        return rgb

    def config_json(self) -> dict:
        return {
            "n_fine_categories": self.config.n_fine_categories,
            "resolution": self.config.resolution,
            "truncation": self.config.truncation,
            "seed": self.config.seed,
        }

    def save_spec(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.config_json(), f, sort_keys=True)

    @classmethod
    def load_spec(cls, path: str) -> "SyntheticGenerator":
        with open(path) as f:
            d = json.load(f)
        return cls(GeneratorConfig(**d))


# --------------------------------------------------------------------------
# Finite-library baseline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LibraryEntry:
    id: str
    fine: int
    image: np.ndarray           # preprocessed grayscale (H, W)
    latent: np.ndarray | None


class FiniteLibrary:
    """Fixed list of (fine category, preprocessed image) pairs."""

    def __init__(self, entries: list[LibraryEntry]):
        if not entries:
            raise ValueError("FiniteLibrary must be non-empty")
        self.entries = tuple(entries)

    def __len__(self):
        return len(self.entries)

    @classmethod
    def build(cls, generator: SyntheticGenerator, n: int, seed: int,
              mask_radius: float = 1.0) -> "FiniteLibrary":
        """Sample n fixed images from the generator, one category draw each."""
        rng = RngStream(seed, ("library",))
        entries = []
        for i in range(n):
            fine = int(rng.child("cat", i).integers(0, generator.config.n_fine_categories))
            z = generator.sample_latent(rng.child("z", i))
            img = datamod.preprocess(generator.generate(fine, z), mask_radius)
            entries.append(LibraryEntry("lib%05d" % i, fine, img, z))
        return cls(entries)

    def save(self, directory: str) -> None:
        os.makedirs(os.path.join(directory, "stimuli"), exist_ok=True)
        index = []
        for e in self.entries:
            datamod.save_pgm(os.path.join(directory, "stimuli", "%s.pgm" % e.id),
                             e.image)
            index.append({"id": e.id, "fine": e.fine,
                          "latent": None if e.latent is None else e.latent.tolist()})
        with open(os.path.join(directory, "library.json"), "w") as f:
            json.dump(index, f, sort_keys=True)

    @classmethod
    def load(cls, directory: str) -> "FiniteLibrary":
        path = os.path.join(directory, "library.json")
        try:
            with open(path) as f:
                index = json.load(f)
        except OSError:
            raise datamod.DataError("missing library index: %s" % path)
        entries = []
        for row in index:
            img = datamod.load_pgm(os.path.join(directory, "stimuli",
                                                "%s.pgm" % row["id"]))
            latent = None if row["latent"] is None else np.array(row["latent"])
            entries.append(LibraryEntry(row["id"], int(row["fine"]), img, latent))
        return cls(entries)


def library_search_source(lib: FiniteLibrary, fine_set=None, coarse_label=None):
    """Yield library entries in stored order, one epoch per pass.

    With fine_set given, only entries whose category is in the set are
    yielded; an empty filtered stream is an error naming the coarse label.
    """
    if fine_set is not None:
        allowed = set(int(v) for v in fine_set)
        entries = [e for e in lib.entries if e.fine in allowed]
        if not entries:
            raise ValueError(
                "library has no entries for coarse label %s" % coarse_label)
    else:
        entries = list(lib.entries)

    def stream():
        while True:
            for e in entries:
                yield e

    return stream()
