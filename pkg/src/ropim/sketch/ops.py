"""Sparse projection, retraction and complement operators.

None of these materialize P. The heavy loops live in ``_kernels`` (compiled)
with ``_fallback`` (numpy) used when the extension is missing or when
``ROPIM_BACKEND=numpy`` is set before import.
"""

from __future__ import annotations

import os

import numpy as np

from ropim import rng
from ropim.errors import DomainError, ShapeError
from ropim.sketch import _fallback
from ropim.sketch.spec import SketchSpec, as_ratio, round_half_up

BACKENDS = {"numpy": _fallback}
try:
    from ropim.sketch import _kernels
except ImportError:  # extension not built
    pass
else:
    BACKENDS["cython"] = _kernels

_impl = BACKENDS.get(os.environ.get("ROPIM_BACKEND", "cython").lower(), _fallback)


def use_backend(name: str) -> None:
    """Switch the kernel implementation for subsequent calls."""
    global _impl
    try:
        _impl = BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def current_backend() -> str:
    return _impl.BACKEND


def _as_tokens(X, rows: int, what: str) -> tuple[np.ndarray, bool]:
    X = np.asarray(X)
    vector = X.ndim == 1
    if vector:
        X = X[:, None]
    if X.ndim != 2:
        raise ShapeError(f"{what} must be 1-D or 2-D, got shape {X.shape}")
    if X.shape[0] != rows:
        raise ShapeError(f"{what} has {X.shape[0]} rows, sketch expects {rows}")
    if X.dtype != np.float32:
        X = X.astype(np.float64, copy=False)
    return np.ascontiguousarray(X), vector


def _out(Y, vector):
    return Y[:, 0] if vector else Y


def project(spec: SketchSpec, X) -> np.ndarray:
    """P @ X for X with K rows; O(K * D)."""
    X, vec = _as_tokens(X, spec.K, "X")
    return _out(_impl.project(spec.h0, spec.s, X, spec.K_out), vec)


def retract(spec: SketchSpec, Y) -> np.ndarray:
    """Pseudo-inverse P^+ @ Y for Y with K' rows.

    PAPER_SCALED returns (K'/K) P^T Y. EXACT_PROJECTOR returns
    P^T diag(1/c) Y with empty buckets contributing zero.
    """
    Y, vec = _as_tokens(Y, spec.K_out, "Y")
    return _out(_impl.retract(spec.h0, spec.s, spec.bucket_scale, Y), vec)


def roundtrip(spec: SketchSpec, X) -> np.ndarray:
    """P^+ P X: project then retract."""
    X, vec = _as_tokens(X, spec.K, "X")
    return _out(_impl.roundtrip(spec.h0, spec.s, spec.bucket_scale, X, spec.K_out), vec)


def complement_roundtrip(spec: SketchSpec, X) -> np.ndarray:
    """(I - P^+ P) X, the information the round trip removes."""
    X, vec = _as_tokens(X, spec.K, "X")
    return _out(_impl.complement(spec.h0, spec.s, spec.bucket_scale, X, spec.K_out), vec)


def estimate_inner_product(spec: SketchSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != spec.K or y.size != spec.K:
        raise ShapeError(f"x and y must be vectors of length {spec.K}, got {x.shape}, {y.shape}")
    return float(project(spec, x) @ project(spec, y))


def sketch_inner_products(H0, S, x, y, K_out: int) -> np.ndarray:
    """<P_m x, P_m y> for each stacked sketch ``(H0[m], S[m])``."""
    H0 = np.ascontiguousarray(H0, dtype=np.int32)
    S = np.ascontiguousarray(S, dtype=np.int8)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if H0.shape != S.shape or H0.ndim != 2 or x.shape != (H0.shape[1],) or y.shape != x.shape:
        raise ShapeError("inconsistent stacked sketch / vector shapes")
    return _impl.sketch_inner_products(H0, S, x, y, int(K_out))


def mask_count(ratio, N: int) -> int:
    return round_half_up(as_ratio(ratio) * N)


class MaskSpec:
    """Which token rows a masking draw removed (``True`` = removed)."""

    __slots__ = ("mask", "ratio")

    def __init__(self, mask: np.ndarray, ratio: float):
        mask = np.array(mask, dtype=bool)
        mask.setflags(write=False)
        self.mask = mask
        self.ratio = float(ratio)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def __repr__(self):
        return f"MaskSpec(N={self.mask.size}, masked={self.count}, ratio={self.ratio:g})"


def mask_tokens(ratio, X, seed) -> tuple[np.ndarray, MaskSpec]:
    """Zero ``round(ratio * N)`` rows chosen uniformly without replacement."""
    r = as_ratio(ratio)
    if not (0 <= r <= 1):
        raise DomainError(f"mask ratio must lie in [0, 1], got {float(r)}")
    X = np.asarray(X)
    if X.ndim != 2:
        raise ShapeError(f"X must be 2-D, got shape {X.shape}")
    N = X.shape[0]
    chosen = rng.random_permutation(rng.philox(seed), N)[: mask_count(r, N)]
    mask = np.zeros(N, dtype=bool)
    mask[chosen] = True
    out = X.copy()
    out[mask] = 0
    return out, MaskSpec(mask, float(r))
