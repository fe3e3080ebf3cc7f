"""Seeded synthetic weights, activations and toy checkpoints."""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from .otf import write_tensor
from .tensor import DenseTensor


def gaussian_weights(rows: int, cols: int, rng: np.random.Generator, std: float = 0.02,
                     outlier_frac: float = 0.0, outlier_sigma: float = 5.0) -> np.ndarray:
    """Gaussian weights; a random ``outlier_frac`` of entries set to +-``outlier_sigma`` std."""
    w = rng.normal(0.0, std, size=(rows, cols))
    if outlier_frac > 0:
        mask = rng.random((rows, cols)) < outlier_frac
        signs = rng.choice([-1.0, 1.0], size=(rows, cols))
        w = np.where(mask, signs * outlier_sigma * std, w)
    return w.astype(np.float32)


def gaussian_activations(tokens: int, features: int, rng: np.random.Generator, std: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, std, size=(tokens, features)).astype(np.float32)


def make_checkpoint(directory, n_layers: int = 4, rows: int = 64, cols: int = 64,
                    calib_rows: int = 256, seed: int = 0, outlier_frac: float = 0.01) -> List[str]:
    """Write ``<dir>/weights`` (manifest + layers) and ``<dir>/calib``."""
    directory = Path(directory)
    wdir, cdir = directory / "weights", directory / "calib"
    wdir.mkdir(parents=True, exist_ok=True)
    cdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = [f"layer{i}" for i in range(n_layers)]
    for name in names:
        write_tensor(DenseTensor(gaussian_weights(rows, cols, rng, outlier_frac=outlier_frac)), wdir / f"{name}.otf")
        write_tensor(DenseTensor(gaussian_activations(calib_rows, cols, rng)), cdir / f"{name}.otf")
    (wdir / "manifest.txt").write_text("\n".join(names) + "\n")
    return names
