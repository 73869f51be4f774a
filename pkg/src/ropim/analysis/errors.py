"""Token-level error statistics of sketching versus binary masking.

Works on raw [0, 1] pixels with no embedding (W = I): each image becomes a
grid of flattened patches, and four corrupted versions are compared with it:

* ``sketch``      - the round trip P^+ P X
* ``mask``        - X with a random subset of tokens zeroed
* ``sketch_comp`` - the complement (I - P^+ P) X
* ``unmask``      - only the masked tokens kept (the complement of masking)
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ropim import rng
from ropim.data import Dataset
from ropim.errors import ShapeError
from ropim.sketch import Mode, complement_roundtrip, draw_sketch, mask_tokens, roundtrip
from ropim.vit import patchify

CSV_HEADER = ("image", "token", "err_sketch", "err_mask", "err_sketch_comp", "err_unmask")
METHODS = ("sketch", "mask", "sketch_comp", "unmask")
_MASK_STREAM = 0x3A5C


def token_errors(X, X_corrupt) -> np.ndarray:
    """Per-row l1 distance sum_d |X - X_corrupt|."""
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(X_corrupt, dtype=np.float64)
    if X.shape != Y.shape:
        raise ShapeError(f"shape mismatch {X.shape} vs {Y.shape}")
    return np.abs(X - Y).sum(axis=-1)


def image_token_errors(X: np.ndarray, spec, mask_ratio, mask_seed) -> tuple[np.ndarray, np.ndarray]:
    """(4, N) errors in METHODS order, plus the boolean mask used."""
    masked, mspec = mask_tokens(mask_ratio, X, mask_seed)
    unmasked = X - masked
    errs = np.stack([
        token_errors(X, roundtrip(spec, X)),
        token_errors(X, masked),
        token_errors(X, complement_roundtrip(spec, X)),
        token_errors(X, unmasked),
    ])
    return errs, np.asarray(mspec.mask)


@dataclass
class ErrorStudy:
    """Per-token errors (n_images, 4, N) and per-image mask, with summaries."""
    errors: np.ndarray
    masks: np.ndarray
    image_ids: np.ndarray
    threshold: float
    params: dict = field(default_factory=dict)

    @property
    def n_images(self) -> int:
        return self.errors.shape[0]

    def counts(self) -> np.ndarray:
        """(n_images, 4) number of tokens whose error exceeds the threshold."""
        return (self.errors > self.threshold).sum(axis=2)

    def normalized_errors(self) -> np.ndarray:
        """Token errors divided by their image's above-threshold count (0 if none)."""
        c = self.counts()[:, :, None].astype(np.float64)
        out = np.zeros_like(self.errors)
        np.divide(self.errors, c, out=out, where=c > 0)
        return out

    def summary(self) -> dict:
        c = self.counts()
        e = self.errors
        masked = self.masks
        visible = ~masked
        return {
            "n_images": int(self.n_images),
            "tokens_per_image": int(e.shape[2]),
            "masked_tokens_per_image_min": int(masked.sum(axis=1).min()),
            "masked_tokens_per_image_max": int(masked.sum(axis=1).max()),
            "mean_count_sketch": float(c[:, 0].mean()),
            "mean_count_mask": float(c[:, 1].mean()),
            "mean_count_sketch_comp": float(c[:, 2].mean()),
            "mean_count_unmask": float(c[:, 3].mean()),
            "frac_images_sketch_gt_mask": float(np.mean(c[:, 0] > c[:, 1])),
            "frac_images_comp_gt_unmask": float(np.mean(c[:, 2] > c[:, 3])),
            "mean_err_per_token_sketch": float(e[:, 0].mean()),
            "mean_err_per_masked_token": float(e[:, 1][masked].mean()) if masked.any() else 0.0,
            "mean_err_per_token_sketch_comp": float(e[:, 2].mean()),
            "mean_err_per_visible_token_unmask": (float(e[:, 3][visible].mean())
                                                  if visible.any() else 0.0),
            "mean_normalized_sketch": float(self.normalized_errors()[:, 0].mean()),
            "mean_normalized_mask": float(self.normalized_errors()[:, 1].mean()),
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for i, img in enumerate(self.image_ids):
                for t in range(self.errors.shape[2]):
                    w.writerow([int(img), t] + [f"{v:.6g}" for v in self.errors[i, :, t]])
        return path


def read_csv(path) -> tuple[tuple[str, ...], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        rows = np.array([[float(v) for v in row] for row in reader])
    return header, rows


def error_study(dataset: Dataset, n_images: int = 1000, rho=0.25, mask_ratio=0.75,
                threshold: float = 0.1, seed: int = 0, grid: int = 16,
                mode=Mode.PAPER_SCALED, threads: int = 1) -> ErrorStudy:
    """Compare sketch round trips with masking on ``n_images`` random images.

    Images are cut into a ``grid`` x ``grid`` token grid (16 x 16 by default;
    2 x 2 patches for 32 x 32 images). Image order, sketches and masks all
    derive from ``seed``; results do not depend on ``threads``.
    """
    if dataset.stats is not None:
        raise ValueError("error study works on raw [0, 1] pixels")
    H, W, _ = dataset.image_shape
    if H % grid or W % grid or H != W:
        raise ShapeError(f"{H}x{W} images do not split into a {grid}x{grid} token grid")
    P = H // grid
    n_images = min(n_images, len(dataset))
    order = rng.random_permutation(rng.philox(rng.derive_seed(seed, 0xE550)), len(dataset))
    ids = order[:n_images]
    N = grid * grid

    def one(i: int):
        X = patchify(dataset.images[ids[i]], P)
        spec = draw_sketch(N, rho, rng.derive_seed(seed, 0, int(ids[i])), mode)
        return image_token_errors(X, spec, mask_ratio,
                                  rng.derive_seed(seed, _MASK_STREAM, int(ids[i])))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(n_images)))
    else:
        results = [one(i) for i in range(n_images)]
    errors = np.stack([r[0] for r in results])
    masks = np.stack([r[1] for r in results])
    params = {"n_images": n_images, "rho": str(rho), "mask_ratio": str(mask_ratio),
              "threshold": threshold, "seed": seed, "grid": grid, "patch_size": P,
              "mode": Mode.parse(mode).flag}
    return ErrorStudy(errors, masks, ids, threshold, params)
