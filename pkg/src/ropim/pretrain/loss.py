"""The complement-weighted l1 reconstruction objective."""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from ropim import autodiff as ad
from ropim import sketch
from ropim.errors import ShapeError
from ropim.sketch import SketchSpec
from ropim.vit import ViTModel, decode, embed, encode


class Reduction(enum.Enum):
    MEAN_ABS = "mean"
    SUM_ABS = "sum"

    @classmethod
    def parse(cls, value) -> "Reduction":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "")
        for r in cls:
            if key in (r.value, r.name.lower().replace("_", ""), r.value + "abs"):
                return r
        raise ValueError(f"unknown reduction {value!r}")


def _per_sample(fn, specs: Sequence[SketchSpec]):
    def apply(arr: np.ndarray) -> np.ndarray:
        if arr.ndim == 2:
            return fn(specs[0], arr).astype(arr.dtype, copy=False)
        return np.stack([fn(sp, a) for sp, a in zip(specs, arr)]).astype(arr.dtype, copy=False)
    return apply


def sketch_tokens(x: ad.Tensor, specs: Sequence[SketchSpec]) -> ad.Tensor:
    """P^+ P along the token axis, one spec per sample. The map is symmetric."""
    f = _per_sample(sketch.roundtrip, specs)
    return ad.linear_map(x, f, f)


def complement_tokens(x: ad.Tensor, specs: Sequence[SketchSpec]) -> ad.Tensor:
    """(I - P^+ P) along the token axis; also its own adjoint."""
    f = _per_sample(sketch.complement_roundtrip, specs)
    return ad.linear_map(x, f, f)


def predict(X, model: ViTModel, specs: Sequence[SketchSpec]) -> ad.Tensor:
    """X~ = f(P^+ P X W) W* for one sample (N x p) or a batch (B x N x p)."""
    return decode(encode(sketch_tokens(embed(X, model), specs), model), model)


def ropim_loss(X, model: ViTModel, spec, reduction=Reduction.MEAN_ABS) -> ad.Tensor:
    """|| (I - P^+ P)(X - X~) ||_1, reduced by mean (default) or sum.

    ``spec`` is one SketchSpec for a single N x p sample, or a sequence of
    specs for a B x N x p batch. For a batch the returned value is the mean of
    the per-sample losses, so its gradient is the mean per-sample gradient.
    The same spec parameterizes the input sketch and the loss complement.
    """
    X = np.asarray(X, dtype=model.dtype)
    specs = [spec] if isinstance(spec, SketchSpec) else list(spec)
    batch = X.ndim == 3
    if (batch and len(specs) != X.shape[0]) or (not batch and len(specs) != 1):
        raise ShapeError("need exactly one sketch per sample")
    N = X.shape[-2]
    if N != model.config.token_count or any(sp.K != N for sp in specs):
        raise ShapeError(f"sketch K and model token count must equal N={N}")
    residual = ad.sub(X, predict(X, model, specs))
    comp = complement_tokens(residual, specs)
    red = Reduction.parse(reduction)
    if red is Reduction.MEAN_ABS:
        return ad.abs_mean(comp)
    total = ad.abs_sum(comp)
    return ad.scale(total, 1.0 / len(specs)) if batch else total
