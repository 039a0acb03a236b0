"""From-scratch training and evaluation of discretized architectures."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import ImageDataset, SplitSpec, split
from .errors import ConfigError
from .optim import LrSchedule, SgdMomentum, lr_at, zero_grads
from .supernet import Architecture, arch_param_count, instantiate
from .tensor import Tensor, backward, cross_entropy, no_grad, reset_tape


@dataclass
class TrainConfig:
    """Stand-alone training regime.

    Defaults follow the published evaluation protocol (SGD momentum 0.9,
    weight decay 4e-4, cosine lr from 0.04, translation + flip augmentation,
    500 epochs at 96 initial channels); override epochs/channels for
    CPU-scale runs.
    """

    epochs: int = 500
    initial_channels: int = 96
    batch_size: int = 64
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 4e-4
    augment: bool = True
    crop_pad: int = 4
    label_smoothing: float = 0.0
    seed: int = 0
    best_by: str = "test"  # "test" | "holdout"

    def to_dict(self) -> dict:
        return asdict(self)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    return (images - mean) / std


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random pad-and-crop translation plus horizontal flip, per image."""
    n, h, w, c = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w, :]
        out[i] = crop[:, ::-1, :] if flips[i] else crop
    return out


def evaluate(network, dataset: ImageDataset, batch_size: int = 64) -> dict:
    """Deterministic evaluation: mean loss, top-1/top-5 error, accuracy.

    ``network`` is anything exposing ``logits(Tensor) -> Tensor``. No
    augmentation is applied; images are normalized with the dataset's
    statistics. Top-5 is reported only when there are at least 5 classes.
    """
    n = len(dataset)
    correct1 = 0
    correct5 = 0
    loss_sum = 0.0
    want_top5 = dataset.num_classes >= 5
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            x = Tensor(normalize(dataset.images[sl], dataset.mean, dataset.std))
            logits = network.logits(x)
            labels = dataset.labels[sl]
            loss_sum += float(cross_entropy(logits, labels).values) * (sl.stop - sl.start)
            lv = logits.values
            correct1 += int((lv.argmax(axis=1) == labels).sum())
            if want_top5:
                top5 = np.argsort(-lv, kind="stable", axis=1)[:, :5]
                correct5 += int((top5 == labels[:, None]).any(axis=1).sum())
    reset_tape()
    return {
        "loss": loss_sum / n,
        "top1_error": 1.0 - correct1 / n,
        "top5_error": (1.0 - correct5 / n) if want_top5 else float("nan"),
        "accuracy": correct1 / n,
    }


def count_params(obj, initial_channels: int | None = None) -> int:
    """Exact trainable-scalar count of a network, or analytic count of an
    Architecture at a given width."""
    if isinstance(obj, Architecture):
        return arch_param_count(obj, initial_channels)
    return obj.param_count()


def train_final(arch: Architecture, cfg: TrainConfig, train_ds: ImageDataset,
                test_ds: ImageDataset):
    """Train a discrete architecture from scratch; returns (net, history).

    History rows are (epoch, train_loss, test_top1, test_top5). The best
    parameters (by test accuracy, or by a held-out slice of the training set
    when ``best_by='holdout'``) are restored into the returned network.
    """
    if train_ds.labels is None:
        raise ConfigError("training requires a labelled dataset")
    if train_ds.num_classes != arch.macro.num_classes:
        raise ConfigError(
            f"dataset has {train_ds.num_classes} classes but the architecture head "
            f"expects {arch.macro.num_classes}"
        )

    net = instantiate(arch, initial_channels=cfg.initial_channels, seed=cfg.seed)
    params = net.parameters()
    opt = SgdMomentum(params, cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = LrSchedule("cosine", cfg.lr, total_steps=max(cfg.epochs, 1))
    rng = np.random.default_rng(cfg.seed + 101)

    if cfg.best_by == "holdout":
        fit_ds, select_ds = split(train_ds, SplitSpec(0.9, cfg.seed + 7))
    else:
        fit_ds, select_ds = train_ds, test_ds

    history = []
    best_acc = -1.0
    best_params = [p.values.copy() for p in params]
    images, labels = fit_ds.images, fit_ds.labels
    n = len(fit_ds)
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(sched, epoch)
        order = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = images[idx]
            if cfg.augment:
                batch = augment_batch(batch, rng, pad=cfg.crop_pad)
            x = Tensor(normalize(batch, train_ds.mean, train_ds.std))
            reset_tape()
            zero_grads(params)
            loss = cross_entropy(net.logits(x), labels[idx], smoothing=cfg.label_smoothing)
            backward(loss)
            opt.step()
            loss_sum += float(loss.values) * len(idx)
            seen += len(idx)
        reset_tape()

        select = evaluate(net, select_ds, batch_size=cfg.batch_size)
        if cfg.best_by == "holdout":
            test = evaluate(net, test_ds, batch_size=cfg.batch_size)
        else:
            test = select
        history.append((epoch, loss_sum / seen, test["top1_error"], test["top5_error"]))
        if select["accuracy"] > best_acc:
            best_acc = select["accuracy"]
            best_params = [p.values.copy() for p in params]

    for p, best in zip(params, best_params):
        p.values[...] = best
    return net, history
