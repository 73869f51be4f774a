"""Linear-probe evaluation of a frozen encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ropim import rng
from ropim.data import ChannelStats, Dataset, split_indices, standardize
from ropim.errors import ConfigMismatchError
from ropim.pretrain.checkpoint import Checkpoint
from ropim.pretrain.optim import OptimizerState, adamw_step
from ropim.vit import ViTModel, features, patchify


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int


def encoder_features(model: ViTModel, dataset: Dataset, chunk: int = 64) -> np.ndarray:
    """Mean-pooled patch outputs for every image, computed in chunks."""
    P = model.config.patch_size
    out = []
    for start in range(0, len(dataset), chunk):
        X = np.stack([patchify(img, P) for img in dataset.images[start:start + chunk]])
        out.append(features(X.astype(model.dtype), model))
    return np.concatenate(out)


def _prepare(dataset: Dataset, stats: ChannelStats) -> Dataset:
    if dataset.stats is not None:
        return dataset
    return standardize(dataset, stats)[0]


def fit_softmax(F: np.ndarray, y: np.ndarray, classes: int, epochs: int, seed: int,
                lr: float = 1e-2, batch: int = 64, weight_decay: float = 1e-4):
    """Multinomial logistic regression by minibatch AdamW; returns (W, b)."""
    n, d = F.shape
    W = np.zeros((d, classes))
    b = np.zeros(classes)
    state = OptimizerState()
    onehot = np.eye(classes)[y]
    bitgen = rng.philox(rng.derive_seed(seed, 0x9B0BE))
    for _ in range(epochs):
        order = rng.random_permutation(bitgen, n)
        for start in range(0, n, batch):
            i = order[start:start + batch]
            z = F[i] @ W + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[i]) / len(i)
            adamw_step({"W": W, "b": b}, {"W": F[i].T @ g, "b": g.sum(axis=0)}, state, lr,
                       0.9, 0.999, weight_decay, decay_mask={"W": True, "b": False})
    return W, b


def linear_probe(checkpoint, train: Dataset, test: Dataset | None = None,
                 probe_epochs: int = 100, seed: int = 0,
                 holdout_fraction: float = 0.3) -> ProbeResult:
    """Freeze the encoder, fit a linear classifier on its pooled features.

    ``checkpoint`` is a :class:`Checkpoint` (or a path to one) or a
    :class:`ViTModel`. Without ``test`` a deterministic ``holdout_fraction``
    of ``train`` is held out.
    """
    stats = None
    if isinstance(checkpoint, ViTModel):
        model = checkpoint
    else:
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        model = checkpoint.model()
        stats = checkpoint.stats()
    if train.labels is None:
        raise ValueError("probe needs labels")
    if test is None:
        held, kept = split_indices(len(train), holdout_fraction, seed)
        train, test = train.subset(kept), train.subset(held, "test")
    if test.class_count != train.class_count:
        raise ConfigMismatchError(f"train has {train.class_count} classes, test has {test.class_count}")
    if stats is None:
        stats = train.stats or standardize(train)[1]
    train, test = _prepare(train, stats), _prepare(test, stats)
    Ftr = encoder_features(model, train).astype(np.float64)
    Fte = encoder_features(model, test).astype(np.float64)
    mu, sd = Ftr.mean(axis=0), Ftr.std(axis=0) + 1e-8
    Ftr, Fte = (Ftr - mu) / sd, (Fte - mu) / sd
    classes = train.class_count
    W, b = fit_softmax(Ftr, train.labels, classes, probe_epochs, seed)
    acc = lambda F, y: float(np.mean(np.argmax(F @ W + b, axis=1) == y))  # noqa: E731
    return ProbeResult(acc(Fte, test.labels), acc(Ftr, train.labels), len(train), len(test))
