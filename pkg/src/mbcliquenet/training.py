"""Loss, SGD with momentum, cosine warm restarts, augmentation and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .clique import BINARY, BN, MFILTER, DeployOnlyError, MBCliqueNet
from .data import Dataset, batches

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "cross_entropy",
    "warm_restart_lr",
    "sgd_step",
    "augment",
    "augment_batch",
    "train_epoch",
    "evaluate",
    "epoch_rng",
    "fit",
    "period_boundaries",
]


@dataclass
class TrainConfig:
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_max: float = 0.1
    lr_min: float = 0.0001
    restart_periods: list = field(default_factory=lambda: [2, 4, 8, 16, 32, 64, 128])
    total_epochs: int = 254
    rng_seed: int = 0
    flip: bool = True
    crop_padding: int = 4
    decay_bn_and_mfilter: bool = False
    clip_ste: bool = False

    def __post_init__(self):
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError("need 0 < lr_min < lr_max")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.restart_periods or min(self.restart_periods) <= 0:
            raise ValueError("restart periods must be positive")


@dataclass
class OptimizerState:
    """Heavy-ball velocity per parameter plus a step counter."""

    velocity: dict = field(default_factory=dict)
    step: int = 0


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} logits rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def warm_restart_lr(t: float, config: TrainConfig) -> float:
    """Cosine-annealed learning rate at fractional epoch ``t``.

    Each period decays from ``lr_max`` to ``lr_min`` and then restarts; once
    the configured periods are used up the rate stays at ``lr_min``.
    """
    start = 0.0
    for period in config.restart_periods:
        if t < start + period:
            frac = (t - start) / period
            return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * frac))
        start += period
    return config.lr_min


def period_boundaries(config: TrainConfig) -> list[int]:
    """Epochs at which each restart period ends."""
    return list(np.cumsum(config.restart_periods))


def _update_order(net: MBCliqueNet) -> list[str]:
    # binarized masters first, M-filters last
    rank = {BINARY: 0, MFILTER: 2}
    return sorted(net.params, key=lambda n: rank.get(net.roles[n], 1))


def sgd_step(net: MBCliqueNet, grads: dict, opt: OptimizerState, lr: float,
             config: TrainConfig) -> None:
    """In-place ``v = mu*v + g + wd*p; p -= lr*v`` over every parameter.

    Binarized banks are re-derived from the updated masters afterwards.
    """
    if not net.has_masters:
        raise DeployOnlyError(
            "deploy-only archive: full-precision masters were not saved, training cannot resume"
        )
    mu, wd = config.momentum, config.weight_decay
    for name in _update_order(net):
        p, g = net.params[name], grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        decay = wd if (config.decay_bn_and_mfilter or net.roles[name] not in (BN, MFILTER)) else 0.0
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p)
        v *= mu
        v += g
        if decay:
            v += decay * p
        p -= lr * v
    opt.step += 1
    net.rebinarize()


def augment(image: np.ndarray, rng: np.random.Generator, flip: bool = True,
            padding: int = 4, decisions=None) -> np.ndarray:
    """Random horizontal flip (p=0.5) then zero-pad and random crop to size.

    ``decisions`` = (flip, dy, dx) forces the random choices.
    """
    c, h, w = image.shape
    if decisions is None:
        do_flip = flip and rng.random() < 0.5
        dy, dx = rng.integers(0, 2 * padding + 1, size=2)
    else:
        do_flip, dy, dx = decisions
    out = image[:, :, ::-1] if do_flip else image
    if padding:
        padded = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=image.dtype)
        padded[:, padding:padding + h, padding:padding + w] = out
        out = padded[:, dy:dy + h, dx:dx + w]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, flip: bool = True,
                  padding: int = 4) -> np.ndarray:
    """Vectorized :func:`augment` with one independent draw per image."""
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    offsets = rng.integers(0, 2 * padding + 1, size=(n, 2))
    out = np.where(flips[:, None, None, None], images[:, :, :, ::-1], images)
    if not padding:
        return np.ascontiguousarray(out)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=images.dtype)
    padded[:, :, padding:padding + h, padding:padding + w] = out
    rows = offsets[:, 0, None] + np.arange(h)
    cols = offsets[:, 1, None] + np.arange(w)
    idx = np.arange(n)[:, None, None, None]
    ch = np.arange(c)[None, :, None, None]
    return padded[idx, ch, rows[:, None, :, None], cols[:, None, None, :]]


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, epoch, purpose)."""
    return np.random.default_rng([seed, epoch, stream])


def train_epoch(net: MBCliqueNet, dataset: Dataset, opt: OptimizerState, config: TrainConfig,
                epoch_index: int, augment_data: bool = True, max_steps: int | None = None,
                lr_trace: list | None = None) -> dict:
    """One pass over ``dataset``; returns mean loss and accuracy of the training batches.

    The learning rate is re-evaluated before every batch at the fractional
    epoch ``epoch_index + b / n_batches``.
    """
    if dataset.n == 0:
        raise ValueError("empty dataset")
    order = batches(dataset, config.batch_size, config.rng_seed, epoch_index)
    aug_rng = epoch_rng(config.rng_seed, epoch_index, 1)
    total_loss, correct, seen = 0.0, 0, 0
    for bi, idx in enumerate(order):
        if max_steps is not None and bi >= max_steps:
            break
        if len(idx) < 2:
            # batch norm needs two samples; a lone trailing sample is skipped
            continue
        x = dataset.images[idx]
        y = dataset.labels[idx]
        if augment_data:
            x = augment_batch(x, aug_rng, config.flip, config.crop_padding)
        lr = warm_restart_lr(epoch_index + bi / len(order), config)
        if lr_trace is not None:
            lr_trace.append(lr)
        logits = net.forward(x, training=True)
        loss, g = cross_entropy(logits, y)
        grads = net.backward(g)
        if config.clip_ste:
            for name in net.binary_names():
                grads[name] = grads[name] * (np.abs(net.params[name]) <= 1)
        sgd_step(net, grads, opt, lr, config)
        total_loss += loss * len(idx)
        correct += int((logits.argmax(axis=1) == y).sum())
        seen += len(idx)
    return {"loss": total_loss / max(seen, 1), "accuracy": correct / max(seen, 1),
            "lr": warm_restart_lr(epoch_index, config)}


def evaluate(net: MBCliqueNet, dataset: Dataset, batch_size: int = 256) -> dict:
    """Inference-mode accuracy and mean loss (argmax ties go to the lowest class)."""
    if dataset.n == 0:
        raise ValueError("empty dataset")
    total_loss, correct = 0.0, 0
    for s in range(0, dataset.n, batch_size):
        x = dataset.images[s:s + batch_size]
        y = dataset.labels[s:s + batch_size]
        logits = net.forward(x, training=False)
        loss, _ = cross_entropy(logits.astype(np.float64), y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return {"accuracy": correct / dataset.n, "loss": total_loss / dataset.n}


def fit(net: MBCliqueNet, train: Dataset, config: TrainConfig, test: Dataset | None = None,
        epochs: int | None = None, opt: OptimizerState | None = None, start_epoch: int = 0,
        augment_data: bool = True, on_epoch=None) -> list[dict]:
    """Run epochs ``start_epoch .. epochs-1``; ``on_epoch(row, opt)`` is called after each."""
    opt = opt or OptimizerState()
    epochs = config.total_epochs if epochs is None else epochs
    history = []
    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        m = train_epoch(net, train, opt, config, epoch, augment_data)
        row = {"epoch": epoch + 1, "lr": m["lr"], "train_loss": m["loss"],
               "train_acc": m["accuracy"]}
        if test is not None:
            ev = evaluate(net, test)
            row.update(test_loss=ev["loss"], test_acc=ev["accuracy"])
        row["wall_seconds"] = time.perf_counter() - t0
        log.info("epoch %d: %s", epoch + 1, row)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row, opt)
    return history
