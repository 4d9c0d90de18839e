"""Supervised NR-Net training: balanced focal loss, RMSprop, augmentation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import DegenerateClassError, InvalidInputError, ShapeError
from .nrnet import NRNet, NRNetConfig

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def class_weights(counts) -> np.ndarray:
    """Weight each class by ``max(N) / N_t`` so the majority class gets 1."""
    n = np.asarray(counts, dtype=np.float64)
    if np.any(n <= 0):
        raise DegenerateClassError(f"every class needs at least one sample, got counts {counts}")
    return n.max() / n


@dataclass
class FocalLossConfig:
    kappa: float = 2.0
    lambda_reg: float = 0.01
    class_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kappa < 0 or self.lambda_reg < 0 or min(self.class_weights) <= 0:
            raise InvalidInputError("focal loss needs kappa >= 0, lambda >= 0, positive class weights")


def focal_term(probs: T.Tensor, targets, alpha, kappa: float) -> T.Tensor:
    """Batch mean of ``-alpha_t (1 - p_t)^kappa log p_t`` with ``p_t`` floored at 1e-12."""
    probs = T.as_tensor(probs)
    P = probs.data if probs.ndim == 2 else probs.data[None]
    t = np.atleast_1d(np.asarray(targets, dtype=int))
    if P.shape[1] != 3 or len(t) != len(P):
        raise ShapeError(f"probabilities {probs.shape} do not match {len(t)} targets")
    if np.any((t < 0) | (t > 2)):
        raise InvalidInputError(f"target class out of range: {t}")
    a = np.asarray(alpha, dtype=np.float64)[t]
    rows = np.arange(len(t))
    raw = P[rows, t].astype(np.float64)
    pt = np.clip(raw, PROB_FLOOR, 1.0)
    q = 1.0 - pt
    logp = np.log(pt)
    per = -a * q**kappa * logp
    n = len(t)

    def backward(g):
        if kappa == 0:
            dfoc = np.zeros_like(pt)
        else:
            dfoc = kappa * q ** (kappa - 1) * logp
        d = -a * (q**kappa / pt - dfoc)
        d = np.where(raw >= PROB_FLOOR, d, 0.0) * (float(g) / n)
        dP = np.zeros_like(P, dtype=np.float64)
        dP[rows, t] = d
        return (dP.astype(P.dtype) if probs.ndim == 2 else dP[0].astype(P.dtype),)

    return T.make_op(np.asarray(per.mean()), (probs,), backward)


def l2_term(weights: list[T.Parameter], lambda_reg: float) -> T.Tensor:
    """``lambda / (2 n_w) * sum ||w||^2`` over the weight matrices."""
    if not weights or lambda_reg == 0:
        return T.Tensor(0.0)
    c = lambda_reg / (2 * len(weights))
    total = sum(float(np.sum(w.data.astype(np.float64) ** 2)) for w in weights)
    return T.make_op(np.asarray(c * total), weights, lambda g: [2 * c * float(g) * w.data for w in weights])


def focal_loss(probs: T.Tensor, targets, config: FocalLossConfig, weights: list[T.Parameter] = ()) -> T.Tensor:
    """Balanced focal loss with L2 weight regularization."""
    loss = focal_term(probs, targets, config.class_weights, config.kappa)
    if weights and config.lambda_reg > 0:
        loss = T.add(loss, l2_term(list(weights), config.lambda_reg))
    return loss


@dataclass
class RMSpropConfig:
    lr: float = 1e-5
    decay: float = 5e-8
    rho: float = 0.9
    eps: float = 1e-7


class RMSprop:
    """RMSprop with time-based decay ``lr_k = lr / (1 + decay * k)``."""

    def __init__(self, config: RMSpropConfig | None = None):
        self.config = config or RMSpropConfig()
        self.iterations = 0
        self.accumulators: dict[str, np.ndarray] = {}

    @property
    def current_lr(self) -> float:
        return self.config.lr / (1.0 + self.config.decay * self.iterations)

    def step(self, params: dict[str, T.Parameter]) -> None:
        cfg = self.config
        lr = self.current_lr
        for name, p in params.items():
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            v = self.accumulators.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = cfg.rho * v + (1 - cfg.rho) * g * g
            self.accumulators[name] = v
            p.data = (p.data - lr * g / (np.sqrt(v) + cfg.eps)).astype(p.data.dtype)
        self.iterations += 1


@dataclass
class AugmentationConfig:
    rotation_degrees: float = 10.0
    flip_probability: float = 0.5
    enabled: bool = True


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator,
            angle: float | None = None, flip: bool | None = None) -> np.ndarray:
    """Random rotation (bilinear, zero fill) and horizontal flip; labels are unaffected.

    ``angle`` / ``flip`` override the random draws.
    """
    r = config.rotation_degrees
    drawn_angle = rng.uniform(-r, r)
    drawn_flip = rng.random() < config.flip_probability
    angle = drawn_angle if angle is None else angle
    flip = drawn_flip if flip is None else flip
    out = np.asarray(image, dtype=np.float64)
    if angle != 0.0:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="constant", cval=0.0)
    if flip:
        out = out[:, ::-1]
    return np.clip(out, 0.0, 1.0)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    validation_fraction: float = 0.1
    focal: FocalLossConfig = field(default_factory=FocalLossConfig)
    optimizer: RMSpropConfig = field(default_factory=RMSpropConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    balance_classes: bool = True  # derive focal class weights from label counts

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        focal = d.pop("focal", {})
        if "class_weights" in focal:
            focal["class_weights"] = tuple(focal["class_weights"])
        return cls(
            focal=FocalLossConfig(**focal),
            optimizer=RMSpropConfig(**d.pop("optimizer", {})),
            augmentation=AugmentationConfig(**d.pop("augmentation", {})),
            **d,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def stratified_split(labels, validation_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split; each class contributes ``round(frac * n_c)`` validation items."""
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(validation_fraction * len(idx)))
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _balanced_weights(labels: np.ndarray) -> tuple[float, float, float]:
    counts = np.bincount(labels, minlength=3)
    present = counts > 0
    w = np.ones(3)
    w[present] = class_weights(counts[present])
    return tuple(float(v) for v in w)


@dataclass
class TrainResult:
    model: NRNet
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    optimizer: RMSprop


def accuracy(model: NRNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 128) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(images, batch_size).argmax(axis=1) == labels))


BatchHook = Callable[[int, int, np.ndarray, np.ndarray, np.ndarray, float], None]


def train(images: np.ndarray, labels, net_config: NRNetConfig, config: TrainConfig, seed: int = 0,
          model: NRNet | None = None, validation: tuple[np.ndarray, np.ndarray] | None = None,
          on_batch: BatchHook | None = None, optimizer: RMSprop | None = None) -> TrainResult:
    """Train (or continue training) NR-Net on ``images [n, h, w]`` with integer ``labels``.

    Without an explicit ``validation`` pair a stratified split of the input
    is held out. The returned model is the best-validation snapshot.
    """
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        raise DegenerateClassError("training needs at least two classes")
    rng = np.random.default_rng(seed)
    if validation is None:
        tr, va = stratified_split(labels, config.validation_fraction, rng)
        val_x, val_y = images[va], labels[va]
    else:
        tr = np.arange(len(labels))
        val_x, val_y = validation
    model = model or NRNet(net_config, seed=int(rng.integers(2**31)))
    opt = optimizer or RMSprop(config.optimizer)
    focal = config.focal
    if config.balance_classes:
        focal = FocalLossConfig(focal.kappa, focal.lambda_reg, _balanced_weights(labels[tr]))
    weights = model.weights()
    history = []
    best = (-1.0, 0, model.copy())
    for epoch in range(1, config.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            if config.augmentation.enabled:
                xb = np.stack([augment(images[i], config.augmentation, rng) for i in idx])
            else:
                xb = images[idx]
            yb = labels[idx]
            with T.GradientTape() as tape:
                probs = model.forward(xb, "train")
                loss = focal_loss(probs, yb, focal, weights)
            if on_batch is not None:
                on_batch(epoch, b, xb, yb, probs.data, float(loss.data))
            tape.backward(loss)
            opt.step(model.params)
            losses.append(float(loss.data))
        val_acc = accuracy(model, val_x, val_y) if len(val_y) else float("nan")
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": val_acc, "lr": opt.current_lr}
        history.append(record)
        log.info("epoch=%d loss=%.5f val_accuracy=%.4f", epoch, record["loss"], val_acc)
        if not val_acc <= best[0]:
            best = (val_acc, epoch, model.copy())
    return TrainResult(best[2], history, best[1], best[0], opt)


def format_metrics(record: dict) -> str:
    """One line-delimited ``key=value`` record."""
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())
