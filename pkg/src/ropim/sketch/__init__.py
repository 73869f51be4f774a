"""Count-sketch random orthogonal projection operators."""

from ropim.sketch.ops import (
    BACKENDS,
    MaskSpec,
    complement_roundtrip,
    current_backend,
    estimate_inner_product,
    mask_tokens,
    project,
    retract,
    roundtrip,
    sketch_inner_products,
    use_backend,
)
from ropim.sketch.spec import (
    Mode,
    SketchSpec,
    as_dense,
    as_ratio,
    draw_sketch,
    draw_sketch_arrays,
    signed_permutation,
    sketch_size,
)

__all__ = [
    "BACKENDS", "MaskSpec", "Mode", "SketchSpec", "as_dense", "as_ratio",
    "complement_roundtrip", "current_backend", "draw_sketch", "draw_sketch_arrays", "estimate_inner_product",
    "mask_tokens", "project", "retract", "roundtrip", "signed_permutation",
    "sketch_inner_products", "sketch_size", "use_backend",
]
