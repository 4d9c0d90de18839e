"""End-to-end training protocol: pretrain, pseudo-label, slice and volume self-training."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .forest import Forest, ForestConfig, volume_features
from .nrnet import NRNet, NRNetConfig, desk_config
from .selftrain import (SelfTrainConfig, Trace, init_volume_labels, pseudo_label, slice_self_train,
                        volume_self_train)
from .training import FocalLossConfig, RMSpropConfig, TrainConfig, accuracy, stratified_split, train

log = logging.getLogger(__name__)


@dataclass
class SliceSet:
    """Slices in volume-major order with per-slice labels (-1 = unlabeled)."""

    images: np.ndarray
    volume_ids: list[str]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if not len(self.images) == len(self.volume_ids) == len(self.labels):
            raise InvalidInputError("images, volume ids and labels differ in length")

    def volumes(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, v in enumerate(self.volume_ids):
            out.setdefault(v, []).append(i)
        return {v: np.asarray(ix) for v, ix in out.items()}

    @classmethod
    def from_synth(cls, ds, labels=None) -> "SliceSet":
        return cls(ds.images, list(ds.volume_ids), ds.observed_slice if labels is None else labels)


def desk_train_config(epochs: int = 20) -> TrainConfig:
    # kappa=1: at kappa=2 the loss optimum stays below the 0.8 keep threshold unless labels are ~98% consistent
    return TrainConfig(epochs=epochs, batch_size=16, optimizer=RMSpropConfig(lr=2e-3, decay=1e-3),
                       focal=FocalLossConfig(kappa=1.0))


@dataclass
class PipelineConfig:
    net: NRNetConfig = field(default_factory=desk_config)
    pretrain: TrainConfig = field(default_factory=desk_train_config)
    semi_epochs: int = 4  # retraining on labeled + pseudo-labeled slices
    retrain_epochs: int = 3  # per slice self-training iteration
    retrain_lr: float = 4e-4  # roughly where the pretraining schedule ends
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "pretrain": self.pretrain.to_dict(), "semi_epochs": self.semi_epochs,
                "retrain_epochs": self.retrain_epochs, "retrain_lr": self.retrain_lr,
                "selftrain": asdict(self.selftrain), "forest": asdict(self.forest)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        base = cls()
        return cls(
            net=NRNetConfig.from_dict(d["net"]) if "net" in d else base.net,
            pretrain=TrainConfig.from_dict(d["pretrain"]) if "pretrain" in d else base.pretrain,
            semi_epochs=d.get("semi_epochs", base.semi_epochs),
            retrain_epochs=d.get("retrain_epochs", base.retrain_epochs),
            retrain_lr=d.get("retrain_lr", base.retrain_lr),
            selftrain=SelfTrainConfig(**d.get("selftrain", {})),
            forest=ForestConfig(**d.get("forest", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def volume_feature_matrix(model: NRNet, slices: SliceSet) -> tuple[list[str], np.ndarray, dict[str, np.ndarray]]:
    """Volume ids, their feature rows, and per-volume slice probabilities."""
    probs = model.predict(slices.images, 128)
    vols = slices.volumes()
    ids = list(vols)
    per = {v: probs[ix] for v, ix in vols.items()}
    return ids, np.stack([volume_features(per[v]) for v in ids]), per


@dataclass
class PipelineResult:
    pretrained: NRNet
    model: NRNet
    forest: Forest
    slice_trace: Trace
    volume_trace: Trace
    volume_ids: list[str]
    volume_X: np.ndarray
    volume_init: np.ndarray
    volume_validation: tuple[np.ndarray, np.ndarray]
    volume_seed: int

    def trace_text(self) -> str:
        return self.slice_trace.text() + self.volume_trace.text()


def run_pipeline(labeled: SliceSet, unlabeled: SliceSet, config: PipelineConfig | None = None,
                 seed: int = 0) -> PipelineResult:
    """Full protocol on noisy labeled slices plus an unlabeled pool.

    Labeled volumes keep their (possibly wrong) annotation as the initial
    volume label; unlabeled volumes are rated from their predicted slices.
    """
    cfg = config or PipelineConfig()
    st = cfg.selftrain
    rng = np.random.default_rng(seed)
    seeds = [int(s) for s in rng.integers(0, 2**31, size=6)]
    if np.any(labeled.labels < 0):
        raise InvalidInputError("labeled set contains unlabeled slices")

    tr, va = stratified_split(labeled.labels, cfg.pretrain.validation_fraction, np.random.default_rng(seeds[0]))
    validation = (labeled.images[va], labeled.labels[va])
    pre = train(labeled.images[tr], labeled.labels[tr], cfg.net, cfg.pretrain, seed=seeds[1], validation=validation)
    pretrained = pre.model
    log.info("pretraining best_epoch=%d validation_accuracy=%.4f", pre.best_epoch, pre.best_val_accuracy)

    pseudo, _ = pseudo_label(pretrained, unlabeled.images)
    images = np.concatenate([labeled.images[tr], unlabeled.images])
    labels = np.concatenate([labeled.labels[tr], pseudo])
    semi = train(images, labels, cfg.net, replace(cfg.pretrain, epochs=cfg.semi_epochs), seed=seeds[2],
                 model=pretrained.copy(), validation=validation)

    retrain = replace(cfg.pretrain, optimizer=replace(cfg.pretrain.optimizer, lr=cfg.retrain_lr))
    sres = slice_self_train(semi.model, images, labels, cfg.net, retrain, st, seed=seeds[3],
                            validation=validation, retrain_epochs=cfg.retrain_epochs)
    model = sres.model

    lab_ids, lab_X, _ = volume_feature_matrix(model, labeled)
    lab_vols = labeled.volumes()
    lab_init = [int(np.bincount(labeled.labels[lab_vols[v]], minlength=3).argmax()) for v in lab_ids]
    un_ids, un_X, un_probs = volume_feature_matrix(model, unlabeled)
    un_init = [int(init_volume_labels(un_probs[v].argmax(axis=1), st.fail_rule)) for v in un_ids]
    ids = lab_ids + un_ids
    X = np.concatenate([lab_X, un_X])
    init = np.asarray(lab_init + un_init, dtype=int)

    vtr, vva = stratified_split(init, cfg.pretrain.validation_fraction, np.random.default_rng(seeds[4]))
    vval = (X[vva], init[vva])
    vres = volume_self_train(X[vtr], init[vtr], st, seed=seeds[5], forest_config=cfg.forest, validation=vval)
    return PipelineResult(pretrained, model, vres.forest, sres.trace, vres.trace, [ids[i] for i in vtr],
                          X[vtr], init[vtr], vval, seeds[5])


def sweep_volume_threshold(result: PipelineResult, thresholds, test_X: np.ndarray, test_y,
                           config: PipelineConfig) -> dict[float, float]:
    """Rerun volume self-training at each threshold and score it on ``test_X``."""
    out = {}
    for p in thresholds:
        st = replace(config.selftrain, p_volume=float(p))
        vres = volume_self_train(result.volume_X, result.volume_init, st, seed=result.volume_seed,
                                 forest_config=config.forest, validation=result.volume_validation)
        out[float(p)] = float(np.mean(vres.forest.predict(test_X) == np.asarray(test_y)))
    return out


@dataclass
class BenchmarkReport:
    pre_slice_accuracy: float
    post_slice_accuracy: float
    volume_accuracy: float
    sweep: dict[float, float]
    slice_iterations: int
    volume_iterations: int
    trace: str

    def lines(self) -> list[str]:
        out = [f"pre_slice_accuracy={self.pre_slice_accuracy:.6f}",
               f"post_slice_accuracy={self.post_slice_accuracy:.6f}",
               f"volume_accuracy={self.volume_accuracy:.6f}",
               f"slice_iterations={self.slice_iterations}", f"volume_iterations={self.volume_iterations}"]
        out += [f"sweep p_volume={p:.2f} volume_accuracy={a:.6f}" for p, a in sorted(self.sweep.items())]
        return out


def run_benchmark(data, config: PipelineConfig | None = None, seed: int = 0,
                  thresholds=(0.6, 0.7, 0.8, 0.9)) -> tuple[PipelineResult, BenchmarkReport]:
    """Pipeline on synthetic data scored against the clean test split."""
    cfg = config or PipelineConfig()
    result = run_pipeline(SliceSet.from_synth(data.train), SliceSet.from_synth(data.unlabeled), cfg, seed)
    test = data.test
    pre_acc = accuracy(result.pretrained, test.images, test.true_slice)
    post_acc = accuracy(result.model, test.images, test.true_slice)
    ids, X, _ = volume_feature_matrix(result.model, SliceSet.from_synth(test, test.true_slice))
    y = np.asarray([test.true_volume[v] for v in ids])
    vol_acc = float(np.mean(result.forest.predict(X) == y))
    sweep = sweep_volume_threshold(result, thresholds, X, y, cfg)
    report = BenchmarkReport(pre_acc, post_acc, vol_acc, sweep, len(result.slice_trace.records),
                             len(result.volume_trace.records), result.trace_text())
    return result, report
