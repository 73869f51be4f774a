"""Image renderings of the sketch round trip, its complement and model predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ropim.analysis.ppm import minmax_map, quantize, write_ppm
from ropim.errors import ConfigMismatchError, ShapeError
from ropim.pretrain.checkpoint import Checkpoint
from ropim.pretrain.loss import predict
from ropim.sketch import Mode, SketchSpec, complement_roundtrip, draw_sketch, roundtrip
from ropim.vit import patchify, unpatchify


@dataclass
class Rendered:
    """Raw float images keyed by role, and the files written for them."""
    images: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


def _default_patch(image: np.ndarray) -> int:
    H = image.shape[0]
    return H // 16 if H % 16 == 0 and H >= 16 else 1


def _emit(out_dir: Path, name: str, image: np.ndarray, mapping: str, meta: dict) -> Path:
    """``mapping`` is "identity", "minmax", or "auto" (identity if already in [0, 1])."""
    if mapping == "auto":
        mapping = "identity" if image.min() >= 0 and image.max() <= 1 else "minmax"
    if mapping == "minmax":
        shown, lo, hi = minmax_map(image)
        mapping = f"minmax vmin={lo!r} vmax={hi!r} (display=(v-vmin)/(vmax-vmin))"
    else:
        shown = image
        mapping = "identity clip[0,1]"
    path = write_ppm(out_dir / f"{name}.ppm", quantize(shown))
    lines = [f"{k}={v}" for k, v in meta.items()] + [f"mapping={mapping}"]
    (out_dir / f"{name}.meta").write_text("\n".join(lines) + "\n")
    return path


def sketch_views(image: np.ndarray, rho, seed: int, patch_size: int | None = None,
                 mode=Mode.PAPER_SCALED, spec: SketchSpec | None = None) -> dict:
    """Original, P^+ P X, (I - P^+ P) X and their sum, as H x W x C float arrays.

    ``spec`` overrides the sketch drawn from ``(rho, seed)``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    P = patch_size or _default_patch(img)
    H, W, C = img.shape
    X = patchify(img, P)
    if spec is None:
        spec = draw_sketch(X.shape[0], rho, seed, mode)
    elif spec.K != X.shape[0]:
        raise ShapeError(f"sketch has K={spec.K}, image has {X.shape[0]} tokens")
    rt = roundtrip(spec, X)
    comp = complement_roundtrip(spec, X)
    back = lambda T: unpatchify(T, H, W, P, C)  # noqa: E731
    return {"original": img, "roundtrip": back(rt), "complement": back(comp),
            "sum": back(rt + comp), "spec": spec, "patch_size": P}


def visualize(image: np.ndarray, rho, seed: int, out_dir, patch_size: int | None = None,
              mode=Mode.PAPER_SCALED, prefix: str = "",
              spec: SketchSpec | None = None) -> Rendered:
    """Write original / roundtrip / complement / sum PPMs with ``.meta`` sidecars."""
    views = sketch_views(image, rho, seed, patch_size, mode, spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"rho": str(rho), "seed": seed, "mode": Mode.parse(mode).flag,
            "patch_size": views["patch_size"]}
    result = Rendered()
    for role, mapping in (("original", "identity"), ("roundtrip", "auto"),
                          ("complement", "minmax"), ("sum", "identity")):
        result.images[role] = views[role]
        result.files[role] = _emit(out_dir, prefix + role, views[role], mapping,
                                   dict(meta, role=role))
    return result


def figure_panel(image: np.ndarray, rhos=(0.5, 0.75), seed: int = 0, out_dir=".",
                 patch_size: int | None = None, mode=Mode.PAPER_SCALED,
                 name: str = "panel") -> Path:
    """One row: original, then (roundtrip, complement) for each ratio."""
    cols = []
    maps = []
    for k, rho in enumerate(rhos):
        v = sketch_views(image, rho, seed, patch_size, mode)
        if k == 0:
            cols.append(quantize(v["original"]))
            maps.append("original: identity")
        for role in ("roundtrip", "complement"):
            shown, lo, hi = minmax_map(v[role])
            cols.append(quantize(shown))
            maps.append(f"{role} rho={rho}: minmax vmin={lo!r} vmax={hi!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = write_ppm(out_dir / f"{name}.ppm", np.concatenate(cols, axis=1))
    (out_dir / f"{name}.meta").write_text(
        "\n".join([f"rhos={','.join(map(str, rhos))}", f"seed={seed}", *maps]) + "\n")
    return path


def reconstruct_demo(checkpoint, image: np.ndarray, rho, seed: int, out_dir=None,
                     mode=None) -> Rendered:
    """Sketched input, predicted complement, their sum and the original.

    Works in the checkpoint's standardized space and maps back per channel:
    the sketched input and the sum as x * std + mean, the predicted complement
    as a pure offset x * std, so sketched + complement = sum holds exactly.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    cfg = checkpoint.vit_config
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigMismatchError(f"image {img.shape} does not match checkpoint "
                                  f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
    model = checkpoint.model()
    stats = checkpoint.stats()
    mean = stats.mean if stats is not None else np.zeros(cfg.channels)
    std = stats.std if stats is not None else np.ones(cfg.channels)
    mode = checkpoint.train_config.mode if mode is None else Mode.parse(mode)
    P, H, C = cfg.patch_size, cfg.image_size, cfg.channels
    X = patchify((img - mean) / std, P)
    spec = draw_sketch(X.shape[0], rho, seed, mode)
    sketched = roundtrip(spec, X)
    pred = complement_roundtrip(spec, predict(X, model, [spec]).data)
    back = lambda T: unpatchify(T, H, H, P, C)  # noqa: E731
    result = Rendered()
    result.images = {
        "sketched": back(sketched) * std + mean,
        "predicted_complement": back(pred) * std,
        "original": img,
    }
    result.images["reconstruction"] = result.images["sketched"] + result.images["predicted_complement"]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {"rho": str(rho), "seed": seed, "mode": mode.flag}
        for role, mapping in (("sketched", "auto"), ("predicted_complement", "minmax"),
                              ("reconstruction", "identity"), ("original", "identity")):
            result.files[role] = _emit(out_dir, role, result.images[role], mapping,
                                       dict(meta, role=role))
    return result


def l1(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())
