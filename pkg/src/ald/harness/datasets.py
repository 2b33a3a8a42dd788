"""Offline MNIST-format image data built from scikit-learn's bundled 8x8 digits.

Each 8x8 digit (intensities 0..16) is upsampled to 20x20 with bilinear
interpolation, rescaled to 0..255, and pasted into a 28x28 canvas at a
random offset of up to two pixels from centre.  Base digits are split into
train and held-out pools before augmentation, so no source digit appears in
both files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .idx import load_idx_images, write_idx_images, write_idx_labels

SIDE = 28
INNER = 20
MAX_SHIFT = 2


def _render(digit8: np.ndarray, dx: int, dy: int) -> np.ndarray:
    up = np.clip(zoom(digit8 / 16.0, INNER / 8, order=1), 0.0, 1.0)
    canvas = np.zeros((SIDE, SIDE))
    top = (SIDE - INNER) // 2 + dy
    left = (SIDE - INNER) // 2 + dx
    canvas[top:top + INNER, left:left + INNER] = up
    return np.rint(canvas * 255.0).astype(np.uint8)


def synthesize_digits(n: int, rng: np.random.Generator, pool: np.ndarray | None = None):
    """``n`` rendered 28x28 digits and their labels, drawn from ``pool`` indices."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    pool = np.arange(len(digits.images)) if pool is None else np.asarray(pool)
    src = rng.choice(pool, size=n, replace=n > len(pool))
    shifts = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=(n, 2))
    images = np.stack([_render(digits.images[i], dx, dy) for i, (dx, dy) in zip(src, shifts)])
    return images, digits.target[src].astype(np.uint8)


def make_digit_idx(out_dir, n_train: int = 4096, n_test: int = 1024, seed: int = 0) -> dict[str, Path]:
    """Write ``train-images``, ``train-labels``, ``test-images``, ``test-labels`` IDX files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    from sklearn.datasets import load_digits

    order = rng.permutation(len(load_digits().images))
    cut = int(0.8 * len(order))
    paths = {}
    for split, n, pool in (("train", n_train, order[:cut]), ("test", n_test, order[cut:])):
        images, labels = synthesize_digits(n, rng, pool)
        paths[f"{split}-images"] = out / f"{split}-images-idx3-ubyte"
        paths[f"{split}-labels"] = out / f"{split}-labels-idx1-ubyte"
        write_idx_images(paths[f"{split}-images"], images)
        write_idx_labels(paths[f"{split}-labels"], labels)
    return paths


def load_flat_images(path, limit: int | None = None) -> np.ndarray:
    """IDX images flattened to ``(N, rows * cols)`` grid values in ``[-1, 1]``."""
    images = load_idx_images(path)
    if limit is not None:
        images = images[:limit]
    return images.reshape(len(images), -1)
