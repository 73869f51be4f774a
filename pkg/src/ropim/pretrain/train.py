"""The pre-training loop: one fresh sketch per image, AdamW, warmup + cosine."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ropim import rng
from ropim.data import ChannelStats, Dataset, hflip, random_resized_crop, standardize
from ropim.errors import ConfigMismatchError, TrainingError
from ropim.pretrain.checkpoint import Checkpoint
from ropim.pretrain.config import TrainConfig
from ropim.pretrain.loss import ropim_loss
from ropim.pretrain.optim import OptimizerState, adamw_step, decays, lr_at
from ropim.sketch import draw_sketch
from ropim.vit import ViTConfig, ViTModel, patchify

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "step", "lr", "loss")
CHECKPOINT_NAME = "checkpoint.ropm"
LOSS_LOG_NAME = "loss_log.csv"

# Stream tags keep the shuffle / init / augmentation draws apart from the
# per-sample sketch stream derive_seed(seed, epoch, index).
_INIT = (0xFFFF_FFFF_FFFF_FFFF,)
_SHUFFLE = 0xFFFF_FFFF_FFFF_FFFE
_SHARED = 0xFFFF_FFFF_FFFF_FFFD
_AUGMENT = 1


def sample_spec(config: TrainConfig, token_count: int, epoch: int, index: int):
    """The sketch drawn for dataset item ``index`` in ``epoch``."""
    return draw_sketch(token_count, config.rho, rng.derive_seed(config.seed, epoch, index),
                       config.mode)


def init_model(vit_config: ViTConfig, train_config: TrainConfig) -> ViTModel:
    return ViTModel.init(vit_config, rng.derive_seed(train_config.seed, *_INIT),
                         dtype=train_config.dtype)


def _augment(image: np.ndarray, config: TrainConfig, epoch: int, index: int) -> np.ndarray:
    if not (config.hflip or config.resized_crop):
        return image
    bitgen = rng.philox(rng.derive_seed(config.seed, epoch, index, _AUGMENT))
    if config.resized_crop:
        image = random_resized_crop(image, bitgen)
    if config.hflip and rng.random_signs(bitgen, 1)[0] < 0:
        image = hflip(image)
    return image


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ViTModel
    stats: ChannelStats
    log: list = field(default_factory=list)

    def epoch_means(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for epoch, _, _, loss in self.log:
            sums.setdefault(epoch, []).append(loss)
        return {e: float(np.mean(v)) for e, v in sums.items()}


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for epoch, step, lr, loss in rows:
            w.writerow([epoch, step, repr(float(lr)), repr(float(loss))])


def read_loss_log(path) -> list[tuple[int, int, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != LOG_HEADER:
            raise ValueError(f"unexpected loss log header {header}")
        return [(int(e), int(s), float(lr), float(l)) for e, s, lr, l in reader]


def pretrain(dataset: Dataset, vit_config: ViTConfig, train_config: TrainConfig,
             out_dir=None, model: ViTModel | None = None) -> TrainResult:
    """Run ``train_config.epochs`` epochs over ``dataset``.

    Raw [0, 1] datasets are standardized with their own channel statistics.
    With ``out_dir`` a checkpoint is rewritten after every epoch and the
    per-step loss log is written as CSV.
    """
    if len(dataset) < 1:
        raise ValueError("dataset is empty")
    H, W, C = dataset.image_shape
    if (H, W, C) != (vit_config.image_size, vit_config.image_size, vit_config.channels):
        raise ConfigMismatchError(f"images are {H}x{W}x{C}, model expects "
                                  f"{vit_config.image_size}x{vit_config.image_size}x{vit_config.channels}")
    if dataset.stats is None:
        dataset, stats = standardize(dataset)
    else:
        stats = dataset.stats
    cfg = train_config
    dtype = cfg.dtype
    model = model or init_model(vit_config, cfg)
    N = vit_config.token_count
    P = vit_config.patch_size
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    warmup = math.ceil(cfg.warmup_epochs * per_epoch)
    peak = cfg.peak_lr
    decay_mask = {k: decays(k, t.shape) for k, t in model.params.items()}
    state = OptimizerState()
    rows = []
    step = 0
    checkpoint = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.random_permutation(rng.philox(rng.derive_seed(cfg.seed, epoch, _SHUFFLE)), n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            X = np.stack([patchify(_augment(dataset.images[i], cfg, epoch, int(i)), P)
                          for i in idx]).astype(dtype)
            if cfg.shared_spec:
                shared = draw_sketch(N, cfg.rho, rng.derive_seed(cfg.seed, epoch, _SHARED, b),
                                     cfg.mode)
                specs = [shared] * len(idx)
            else:
                specs = [sample_spec(cfg, N, epoch, int(i)) for i in idx]
            model.zero_grad()
            loss = ropim_loss(X, model, specs, cfg.loss_reduction)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step + 1}")
            loss.backward()
            step += 1
            lr = lr_at(step, total, warmup, peak)
            try:
                adamw_step({k: t.data for k, t in model.params.items()},
                           {k: t.grad for k, t in model.params.items() if t.grad is not None},
                           state, lr, cfg.beta1, cfg.beta2, cfg.weight_decay,
                           decay_mask=decay_mask)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            rows.append((epoch, step, lr, value))
        checkpoint = Checkpoint.from_model(model, cfg, epoch, stats, state)
        if out_dir is not None:
            checkpoint.save(out_dir / CHECKPOINT_NAME)
            write_loss_log(rows, out_dir / LOSS_LOG_NAME)
        log.info("epoch %d/%d mean loss %.6f", epoch, cfg.epochs,
                 np.mean([r[3] for r in rows if r[0] == epoch]))
    return TrainResult(checkpoint, model, stats, rows)
