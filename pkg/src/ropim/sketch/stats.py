"""Monte-Carlo statistics of the sketch operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ropim import rng
from ropim.sketch.ops import roundtrip, complement_roundtrip, sketch_inner_products
from ropim.sketch.spec import Mode, SketchSpec


@dataclass(frozen=True)
class InnerProductStats:
    K: int
    K_out: int
    draws: int
    true_value: float
    mean: float
    variance: float
    variance_bound: float

    @property
    def standard_error(self) -> float:
        return float(np.sqrt(self.variance / self.draws))

    def unbiased(self, z: float = 4.0) -> bool:
        """Sample mean within ``z`` standard errors of the true inner product."""
        return abs(self.mean - self.true_value) < z * self.standard_error

    def within_bound(self, slack: float = 1.05) -> bool:
        return self.variance <= slack * self.variance_bound


def variance_bound(x, y, K_out: int) -> float:
    """(<x, y>^2 + |x|^2 |y|^2) / K'."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float((np.dot(x, y) ** 2 + np.dot(x, x) * np.dot(y, y)) / K_out)


def inner_product_stats(x, y, K_out: int, draws: int, seed: int,
                        inflate: float = 1.0) -> InnerProductStats:
    """Sample <Px, Py> over ``draws`` independent sketches.

    ``inflate`` stretches each estimate's deviation from the sample mean;
    values other than 1 exist only for fault injection in the self-check.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    K = x.size
    H0, S, _ = draw_batch(K, K_out, seed, draws)
    est = sketch_inner_products(H0, S, x, y, K_out)
    if inflate != 1.0:
        est = est.mean() + inflate * (est - est.mean())
    return InnerProductStats(K, K_out, draws, float(x @ y), float(est.mean()),
                             float(est.var(ddof=1)), variance_bound(x, y, K_out))


def draw_batch(K: int, K_out: int, seed: int, count: int):
    """``count`` stacked (0-based h, s) draws with a fixed bucket count K'."""
    bitgen = rng.philox(seed)
    H0 = rng.uniform_below(bitgen, K_out, K * count).reshape(count, K).astype(np.int32)
    S = rng.random_signs(bitgen, K * count).reshape(count, K)
    return H0, S, K_out


def mean_roundtrip(x, K_out: int, draws: int, seed: int,
                   mode=Mode.PAPER_SCALED) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo means of P^+ P x and (I - P^+ P) x over random sketches."""
    x = np.asarray(x, dtype=np.float64)
    K = x.size
    H0, S, _ = draw_batch(K, K_out, seed, draws)
    acc_rt = np.zeros(K)
    acc_c = np.zeros(K)
    for h0, s in zip(H0, S):
        spec = SketchSpec.from_arrays(h0.astype(np.int64) + 1, s, K_out, mode)
        acc_rt += roundtrip(spec, x)
        acc_c += complement_roundtrip(spec, x)
    return acc_rt / draws, acc_c / draws
