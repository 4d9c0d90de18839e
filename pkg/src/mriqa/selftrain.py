"""Semi-supervised labeling and iterative self-training for slices and volumes.

Both stages share one selection rule: an item survives an iteration only if
its predicted label equals its previous label and the prediction's maximal
probability reaches the threshold. Survivors take the predicted label;
everything else is retired from training for good.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .domain import DatasetManifest, ManifestRecord, QualityLabel
from .errors import ConfigError, InvalidInputError, ProtocolError

log = logging.getLogger(__name__)


@dataclass
class SelfTrainConfig:
    p_slice: float = 0.8
    p_volume: float = 0.8
    slice_iterations: int | None = 2  # None: iterate until improvement < min_improvement
    volume_iterations: int | None = 2
    max_iterations: int = 5
    min_improvement: float = 0.005
    fail_rule: str = "both"

    def __post_init__(self):
        for p in (self.p_slice, self.p_volume):
            if not 0.0 < p < 1.0:
                raise ConfigError(f"threshold {p} outside (0, 1)")
        for it in (self.slice_iterations, self.volume_iterations):
            if it is not None and it < 1:
                raise ConfigError("iteration counts must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.fail_rule not in ("both", "either"):
            raise ConfigError(f"fail_rule must be 'both' or 'either', got {self.fail_rule!r}")


def init_volume_labels(slice_labels: Iterable[QualityLabel], fail_rule: str = "both",
                       pass_fraction: float = 0.8) -> QualityLabel:
    """Initial volume rating from its slice labels.

    Pass when strictly more than ``pass_fraction`` of slices pass; Fail when
    fail slices outnumber pass and questionable slices (both, or either with
    ``fail_rule="either"``); Questionable otherwise.
    """
    labels = [QualityLabel(l) for l in slice_labels]
    if not labels:
        raise InvalidInputError("cannot rate an empty volume")
    n = Counter(labels)
    p, q, f = n[QualityLabel.PASS], n[QualityLabel.QUESTIONABLE], n[QualityLabel.FAIL]
    if p > pass_fraction * len(labels):
        return QualityLabel.PASS
    beats = (f > p and f > q) if fail_rule == "both" else (f > p or f > q)
    if beats:
        return QualityLabel.FAIL
    return QualityLabel.QUESTIONABLE


@dataclass
class PseudoLabelRecord:
    item: int
    previous: int
    current: int
    confidence: float
    decision: str  # "kept-relabel" or "pruned"


@dataclass
class Selection:
    kept: np.ndarray  # positions into the input arrays
    labels: np.ndarray  # new labels of the kept items
    pruned: np.ndarray
    records: list[PseudoLabelRecord]


def select_items(previous, probabilities, threshold: float) -> Selection:
    """Keep items whose argmax is unchanged and whose confidence >= threshold."""
    prev = np.asarray(previous, dtype=int)
    P = np.asarray(probabilities, dtype=np.float64)
    if len(prev) != len(P):
        raise InvalidInputError("previous labels and predictions differ in length")
    current = P.argmax(axis=1) if len(P) else np.zeros(0, int)
    conf = P.max(axis=1) if len(P) else np.zeros(0)
    keep = (current == prev) & (conf >= threshold)
    records = [PseudoLabelRecord(i, int(prev[i]), int(current[i]), float(conf[i]),
                                 "kept-relabel" if keep[i] else "pruned") for i in range(len(prev))]
    return Selection(np.flatnonzero(keep), current[keep], np.flatnonzero(~keep), records)


select_slices = select_items
select_volumes = select_items


@dataclass
class IterationRecord:
    iteration: int
    kept: int
    relabeled: int
    pruned: int
    validation_accuracy: float

    def line(self) -> str:
        return (f"iteration={self.iteration} kept={self.kept} relabeled={self.relabeled} "
                f"pruned={self.pruned} validation_accuracy={self.validation_accuracy:.6f}")


@dataclass
class Trace:
    stage: str
    records: list[IterationRecord] = field(default_factory=list)

    def text(self) -> str:
        return "".join(f"stage={self.stage} {r.line()}\n" for r in self.records)


def _iteration_plan(fixed: int | None, cap: int) -> int:
    return fixed if fixed is not None else cap


def _should_stop(fixed: int | None, trace: Trace, baseline: float, min_improvement: float) -> bool:
    if fixed is not None:
        return False
    accs = [baseline] + [r.validation_accuracy for r in trace.records]
    return len(accs) >= 2 and accs[-1] - accs[-2] < min_improvement


# -- slices ------------------------------------------------------------------

def pseudo_label(model, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels and probabilities for unlabeled slices."""
    probs = model.predict(images, batch_size)
    return probs.argmax(axis=1), probs


def pseudo_label_slices(model, labeled: DatasetManifest, unlabeled: DatasetManifest, images: np.ndarray):
    """Label every unlabeled record by argmax and merge with the labeled set.

    ``images`` holds the preprocessed unlabeled slices in manifest order.
    Returns the merged manifest and ``{key: "labeled" | "pseudo"}`` provenance.
    """
    labels, _ = pseudo_label(model, images)
    merged = list(labeled.records)
    provenance = {r.key: "labeled" for r in labeled.records}
    for r, lab in zip(unlabeled.records, labels):
        merged.append(ManifestRecord(r.volume_id, r.slice_index, r.image_path, QualityLabel(int(lab))))
        provenance[r.key] = "pseudo"
    return DatasetManifest(merged, "train"), provenance


@dataclass
class SliceSelfTrainResult:
    model: object
    trace: Trace
    active: np.ndarray  # indices of the surviving training items
    labels: np.ndarray  # their final labels


def slice_self_train(model, images: np.ndarray, labels, net_config, train_config, config: SelfTrainConfig,
                     seed: int = 0, validation: tuple[np.ndarray, np.ndarray] | None = None,
                     retrain_epochs: int | None = None) -> SliceSelfTrainResult:
    """Predict -> select -> retrain, starting from a trained ``model``.

    ``labels`` are the current training labels (pseudo or noisy) and serve
    as the "previous" labels of the first iteration. Retraining continues
    from the current weights for ``retrain_epochs`` (default: the config's).
    """
    from dataclasses import replace

    from .training import accuracy, train

    labels = np.asarray(labels, dtype=int).copy()
    active = np.arange(len(labels))
    previous = labels.copy()
    trace = Trace("slice")
    rng = np.random.default_rng(seed)
    cfg = train_config if retrain_epochs is None else replace(train_config, epochs=retrain_epochs)
    baseline = accuracy(model, *validation) if validation is not None else float("nan")
    for it in range(1, _iteration_plan(config.slice_iterations, config.max_iterations) + 1):
        probs = model.predict(images[active])
        sel = select_items(previous[active], probs, config.p_slice)
        if len(sel.kept) == 0:
            raise ProtocolError(f"slice iteration {it}: all {len(active)} slices pruned")
        kept_idx = active[sel.kept]
        relabeled = int(np.count_nonzero(labels[kept_idx] != sel.labels))
        labels[kept_idx] = sel.labels
        previous[kept_idx] = sel.labels
        active = kept_idx
        if len(np.unique(labels[active])) < 2:
            raise ProtocolError(f"slice iteration {it}: only one class survives pruning")
        result = train(images[active], labels[active], net_config, cfg, seed=int(rng.integers(2**31)),
                       model=model, validation=validation)
        model = result.model
        val = accuracy(model, *validation) if validation is not None else float("nan")
        trace.records.append(IterationRecord(it, len(active), relabeled, len(sel.pruned), val))
        log.info("slice self-training %s", trace.records[-1].line())
        if _should_stop(config.slice_iterations, trace, baseline, config.min_improvement):
            break
    return SliceSelfTrainResult(model, trace, active, labels[active])


# -- volumes -----------------------------------------------------------------

@dataclass
class VolumeSelfTrainResult:
    forest: object
    trace: Trace
    active: np.ndarray
    labels: np.ndarray


def volume_self_train(features: np.ndarray, labels, config: SelfTrainConfig, seed: int = 0,
                      forest_config=None, validation: tuple[np.ndarray, np.ndarray] | None = None
                      ) -> VolumeSelfTrainResult:
    """Fit -> predict -> select -> refit over volume feature vectors."""
    from .forest import fit_forest

    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int).copy()
    active = np.arange(len(labels))
    rng = np.random.default_rng(seed)
    forest = fit_forest(X, labels, forest_config, seed=int(rng.integers(2**31)))
    trace = Trace("volume")

    def val_acc(f) -> float:
        if validation is None or len(validation[1]) == 0:
            return float("nan")
        return float(np.mean(f.predict(validation[0]) == np.asarray(validation[1])))

    baseline = val_acc(forest)
    for it in range(1, _iteration_plan(config.volume_iterations, config.max_iterations) + 1):
        probs = forest.predict_proba(X[active])
        sel = select_items(labels[active], probs, config.p_volume)
        if len(sel.kept) == 0:
            raise ProtocolError(f"volume iteration {it}: all {len(active)} volumes pruned")
        kept_idx = active[sel.kept]
        relabeled = int(np.count_nonzero(labels[kept_idx] != sel.labels))
        labels[kept_idx] = sel.labels
        active = kept_idx
        if len(np.unique(labels[active])) < 2:
            raise ProtocolError(f"volume iteration {it}: only one class survives pruning")
        forest = fit_forest(X[active], labels[active], forest_config, seed=int(rng.integers(2**31)))
        trace.records.append(IterationRecord(it, len(active), relabeled, len(sel.pruned), val_acc(forest)))
        log.info("volume self-training %s", trace.records[-1].line())
        if _should_stop(config.volume_iterations, trace, baseline, config.min_improvement):
            break
    return VolumeSelfTrainResult(forest, trace, active, labels[active])
