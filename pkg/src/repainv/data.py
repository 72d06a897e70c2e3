"""Procedural 32x32 grayscale "textured sprites".

Each image is a dim background plus 2-4 Gaussian blobs, with an oriented
sinusoidal texture painted onto the blob region.  Image i of a dataset with
seed s depends only on (s, i), so any subset can be regenerated.
"""

from __future__ import annotations

import numpy as np

GENERATOR_VERSION = 1

# dataset seeds used throughout the pipeline; disjoint so that tuning never
# sees benchmark images
TRAIN_SEED = 0
HELDOUT_SEED = 1
BENCH_SEED = 2
TUNE_SEED = 3


def sprite(rng: np.random.Generator, size: int = 32, texfreq=(1 / 12, 1 / 6),
           texamp=(0.08, 0.2)) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), rng.uniform(0.05, 0.25))
    cover = np.zeros((size, size))
    margin = 6 * size / 32
    for _ in range(rng.integers(2, 5)):
        c = rng.uniform(margin, size - margin, 2)
        s = rng.uniform(2.5, 6.0) * size / 32
        a = rng.uniform(0.3, 0.7)
        g = np.exp(-((xx - c[0]) ** 2 + (yy - c[1]) ** 2) / (2 * s * s))
        img += a * g
        cover += g
    cover = np.clip(cover, 0.0, 1.0)
    f = rng.uniform(*texfreq) * 32 / size
    th = rng.uniform(0.0, np.pi)
    ph = rng.uniform(0.0, 2 * np.pi)
    amp = rng.uniform(*texamp)
    img += amp * cover * np.sin(2 * np.pi * f * (np.cos(th) * xx + np.sin(th) * yy) + ph)
    return np.clip(img, 0.0, 1.0)


def make_images(seed: int, count: int, size: int = 32, start: int = 0) -> np.ndarray:
    """Images start..start+count-1 of dataset ``seed`` as a (count, size, size) array."""
    if count < 0:
        raise ValueError("count must be non-negative")
    out = np.empty((count, size, size))
    for k in range(count):
        out[k] = sprite(np.random.default_rng([seed, start + k]), size)
    return out


def manifest(seed: int, count: int, size: int = 32) -> dict:
    return {"generator_version": GENERATOR_VERSION, "seed": seed, "count": count, "size": size}
