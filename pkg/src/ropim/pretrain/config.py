"""Run hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from ropim.errors import DomainError
from ropim.pretrain.loss import Reduction
from ropim.sketch import Mode, as_ratio

DEFAULT_BASE_LR = 1.5e-4
LR_REFERENCE_BATCH = 512


@dataclass(frozen=True)
class TrainConfig:
    rho: Fraction = Fraction(1, 7)
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = DEFAULT_BASE_LR
    scale_lr: bool = True
    warmup_epochs: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    seed: int = 0
    loss_reduction: Reduction = Reduction.MEAN_ABS
    precision: str = "f64"
    mode: Mode = Mode.PAPER_SCALED
    shared_spec: bool = False
    hflip: bool = True
    resized_crop: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rho", as_ratio(self.rho))
        object.__setattr__(self, "loss_reduction", Reduction.parse(self.loss_reduction))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not (0 < self.rho <= 1):
            raise DomainError(f"rho must lie in (0, 1], got {float(self.rho)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise DomainError("warmup_epochs must lie in [0, epochs)")
        if self.precision not in ("f32", "f64"):
            raise DomainError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.base_lr < 0:
            raise DomainError("base_lr must be >= 0")

    @property
    def peak_lr(self) -> float:
        """base_lr * batch / 512 under the linear scaling rule, else base_lr as given."""
        if self.scale_lr:
            return self.base_lr * self.batch_size / LR_REFERENCE_BATCH
        return self.base_lr

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho"] = f"{self.rho.numerator}/{self.rho.denominator}"
        d["loss_reduction"] = self.loss_reduction.value
        d["mode"] = self.mode.flag
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})
