"""A small vision transformer: patches in, per-token pixel predictions out.

Tensors carry an optional leading batch axis, so ``embed``/``encode``/``decode``
accept either (N, .) or (B, N, .) inputs.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from ropim import autodiff as ad
from ropim import rng
from ropim.errors import ShapeError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "embed_dim", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.image_size % self.patch_size:
            raise ShapeError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.hidden_dim < 1:
            raise ValueError("mlp_ratio too small")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


def parameter_count(config: ViTConfig) -> int:
    """Closed-form number of scalars in a model built from ``config``."""
    D, H, p = config.embed_dim, config.hidden_dim, config.patch_dim
    N = config.token_count
    per_block = (2 * D              # norm1
                 + D * 3 * D + 3 * D  # qkv
                 + D * D + D        # attention output
                 + 2 * D            # norm2
                 + D * H + H        # fc1
                 + H * D + D)       # fc2
    return p * D + (N + 1) * D + D + config.depth * per_block + D * p


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an H x W x C image into row-major patches, channel-last inside a patch."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {img.shape}")
    H, W, C = img.shape
    P = patch_size
    if H % P or W % P:
        raise ShapeError(f"patch size {P} does not divide image {H}x{W}")
    return (img.reshape(H // P, P, W // P, P, C)
            .transpose(0, 2, 1, 3, 4)
            .reshape((H // P) * (W // P), P * P * C))


def unpatchify(tokens: np.ndarray, height: int, width: int, patch_size: int,
               channels: int) -> np.ndarray:
    P, C = patch_size, channels
    tokens = np.asarray(tokens)
    if tokens.shape != ((height // P) * (width // P), P * P * C):
        raise ShapeError(f"tokens of shape {tokens.shape} do not tile a {height}x{width}x{C} image")
    return (tokens.reshape(height // P, width // P, P, P, C)
            .transpose(0, 2, 1, 3, 4)
            .reshape(height, width, C))


def _trunc_normal(gen: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_names(i: int) -> list[str]:
    return [f"blocks.{i}.{n}" for n in ("norm1.weight", "norm1.bias", "attn.qkv.weight",
                                        "attn.qkv.bias", "attn.proj.weight", "attn.proj.bias",
                                        "norm2.weight", "norm2.bias", "mlp.fc1.weight",
                                        "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias")]


class ViTModel:
    """Parameters of the encoder and its linear decode head.

    ``params`` is an ordered name -> Tensor mapping; the order is the on-disk
    order of checkpoints.
    """

    def __init__(self, config: ViTConfig, params: "OrderedDict[str, ad.Tensor]"):
        self.config = config
        self.params = params
        expected = self.shapes(config)
        if list(params) != list(expected):
            raise ShapeError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")

    @staticmethod
    def shapes(config: ViTConfig) -> "OrderedDict[str, tuple[int, ...]]":
        D, H, p, N = config.embed_dim, config.hidden_dim, config.patch_dim, config.token_count
        out = OrderedDict()
        out["patch_embed.weight"] = (p, D)
        out["pos_embed"] = (N + 1, D)
        out["cls_token"] = (1, D)
        for i in range(config.depth):
            n = _block_names(i)
            for name, shape in zip(n, [(D,), (D,), (D, 3 * D), (3 * D,), (D, D), (D,), (D,), (D,),
                                       (D, H), (H,), (H, D), (D,)]):
                out[name] = shape
        out["decoder.weight"] = (D, p)
        return out

    @classmethod
    def init(cls, config: ViTConfig, seed: int, dtype=np.float64) -> "ViTModel":
        """Truncated-normal(0.02) weights, unit LN gains, zeros elsewhere."""
        gen = rng.generator(seed)
        params = OrderedDict()
        for name, shape in cls.shapes(config).items():
            if name.endswith(".weight") and len(shape) == 2:
                value = _trunc_normal(gen, shape)
            elif "norm" in name and name.endswith(".weight"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            params[name] = ad.parameter(value, name=name, dtype=dtype)
        return cls(config, params)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["patch_embed.weight"].dtype

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        for name, t in self.params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ShapeError(f"{name}: expected shape {t.shape}, got {value.shape}")
            t.data = value.astype(t.dtype, copy=True)


def embed(X, model: ViTModel) -> ad.Tensor:
    """Token embeddings X @ W (no bias)."""
    X = ad.as_tensor(X, dtype=model.dtype)
    if X.shape[-1] != model.config.patch_dim:
        raise ShapeError(f"tokens have width {X.shape[-1]}, model expects {model.config.patch_dim}")
    return ad.matmul(X, model["patch_embed.weight"])


def _attention(x: ad.Tensor, model: ViTModel, prefix: str, heads: int, store=None) -> ad.Tensor:
    *lead, T, D = x.shape
    dh = D // heads
    qkv = ad.matmul(x, model[prefix + "qkv.weight"]) + model[prefix + "qkv.bias"]
    qkv = ad.reshape(qkv, (*lead, T, 3, heads, dh))
    nl = len(lead)
    # -> (3, *lead, heads, T, dh)
    qkv = ad.permute(qkv, (nl + 1, *range(nl), nl + 2, nl, nl + 3))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    if store is not None:
        store.append(attn.data)
    ctx = ad.matmul(attn, v)                       # (*lead, heads, T, dh)
    ctx = ad.permute(ctx, (*range(nl), nl + 1, nl, nl + 2))
    ctx = ad.reshape(ctx, (*lead, T, D))
    return ad.matmul(ctx, model[prefix + "proj.weight"]) + model[prefix + "proj.bias"]


def _block(x: ad.Tensor, model: ViTModel, i: int, store=None) -> ad.Tensor:
    p = f"blocks.{i}."
    h = ad.layer_norm(x, model[p + "norm1.weight"], model[p + "norm1.bias"])
    x = x + _attention(h, model, p + "attn.", model.config.heads, store)
    h = ad.layer_norm(x, model[p + "norm2.weight"], model[p + "norm2.bias"])
    h = ad.gelu(ad.matmul(h, model[p + "mlp.fc1.weight"]) + model[p + "mlp.fc1.bias"])
    h = ad.matmul(h, model[p + "mlp.fc2.weight"]) + model[p + "mlp.fc2.bias"]
    return x + h


def encode(phi, model: ViTModel, attention_maps: list | None = None) -> ad.Tensor:
    """Prepend CLS, add positional embeddings, run the pre-norm blocks.

    Returns (N+1) x D (or B x (N+1) x D); row 0 is the CLS output. When
    ``attention_maps`` is a list, each block's softmax weights are appended.
    """
    phi = ad.as_tensor(phi, dtype=model.dtype)
    N = model.config.token_count
    if phi.shape[-2:] != (N, model.config.embed_dim):
        raise ShapeError(f"encode expects (..., {N}, {model.config.embed_dim}), got {phi.shape}")
    cls = model["cls_token"]
    if phi.data.ndim == 3:
        cls = ad.broadcast_to(cls, (phi.shape[0], 1, cls.shape[-1]))
    x = ad.concat([cls, phi], axis=-2) + model["pos_embed"]
    for i in range(model.config.depth):
        x = _block(x, model, i, attention_maps)
    return x


def decode(psi, model: ViTModel) -> ad.Tensor:
    """Drop the CLS row and apply the linear pixel head."""
    psi = ad.as_tensor(psi, dtype=model.dtype)
    N = model.config.token_count
    if psi.shape[-2] != N + 1:
        raise ShapeError(f"decode expects {N + 1} rows, got {psi.shape[-2]}")
    tokens = psi[..., 1:, :]
    return ad.matmul(tokens, model["decoder.weight"])


def features(X, model: ViTModel) -> np.ndarray:
    """Mean-pooled patch outputs (CLS excluded) of the clean, unsketched input."""
    psi = encode(embed(X, model), model).data
    return psi[..., 1:, :].mean(axis=-2)
