"""Confusion matrices and one-vs-rest sensitivity / specificity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import CLASS_NAMES, QualityLabel
from .errors import InvalidInputError

SLICE_EXCLUSION = (False, True, False)  # actual-questionable slices are not scored
NO_EXCLUSION = (False, False, False)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are actual classes, columns predicted; masked rows are excluded from metrics."""

    counts: np.ndarray
    excluded: tuple[bool, bool, bool] = NO_EXCLUSION

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (3, 3) or np.any(c < 0) or not np.issubdtype(c.dtype, np.integer):
            raise InvalidInputError("confusion counts must be a non-negative 3x3 integer array")
        object.__setattr__(self, "counts", c.astype(np.int64))
        object.__setattr__(self, "excluded", tuple(bool(e) for e in self.excluded))

    @property
    def scored(self) -> np.ndarray:
        """Counts with excluded rows zeroed."""
        c = self.counts.copy()
        c[list(self.excluded)] = 0
        return c

    def table(self) -> str:
        head = "actual\\predicted " + " ".join(f"{n:>12}" for n in CLASS_NAMES)
        rows = []
        for i, name in enumerate(CLASS_NAMES):
            cells = ["-" if self.excluded[i] else str(v) for v in self.counts[i]]
            rows.append(f"{name:<16} " + " ".join(f"{c:>12}" for c in cells))
        return "\n".join([head] + rows)


def confusion(predictions, truths, excluded=NO_EXCLUSION) -> ConfusionMatrix:
    p = np.asarray([int(QualityLabel(x)) for x in predictions], dtype=int)
    t = np.asarray([int(QualityLabel(x)) for x in truths], dtype=int)
    if len(p) != len(t):
        raise InvalidInputError(f"{len(p)} predictions vs {len(t)} truths")
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, excluded)


@dataclass
class MetricsReport:
    sensitivity: list[float | None]
    specificity: list[float | None]
    accuracy: float | None
    support: list[int]
    undefined: list[str] = field(default_factory=list)  # names of metrics with a zero denominator

    def key_values(self) -> list[str]:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"
        out = []
        for i, name in enumerate(CLASS_NAMES):
            out.append(f"class={name} support={self.support[i]} sensitivity={fmt(self.sensitivity[i])} "
                       f"specificity={fmt(self.specificity[i])}")
        out.append(f"accuracy={fmt(self.accuracy)}")
        return out

    def table(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.4f}"
        lines = [f"{'class':<14}{'support':>9}{'sensitivity':>13}{'specificity':>13}"]
        for i, name in enumerate(CLASS_NAMES):
            lines.append(f"{name:<14}{self.support[i]:>9}{fmt(self.sensitivity[i]):>13}{fmt(self.specificity[i]):>13}")
        lines.append(f"accuracy {fmt(self.accuracy)}")
        return "\n".join(lines)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest rates over the unmasked rows; masked classes get no metrics."""
    c = cm.scored
    total = int(c.sum())
    sens: list[float | None] = []
    spec: list[float | None] = []
    undefined = []
    for k, name in enumerate(CLASS_NAMES):
        if cm.excluded[k]:
            sens.append(None)
            spec.append(None)
            continue
        tp = int(c[k, k])
        actual = int(c[k].sum())
        fp = int(c[:, k].sum()) - tp
        tn = total - actual - fp
        sens.append(_ratio(tp, actual))
        spec.append(_ratio(tn, tn + fp))
        if sens[-1] is None:
            undefined.append(f"sensitivity.{name}")
        if spec[-1] is None:
            undefined.append(f"specificity.{name}")
    acc = _ratio(int(np.trace(c)), total)
    if acc is None:
        undefined.append("accuracy")
    return MetricsReport(sens, spec, acc, [int(v) for v in c.sum(axis=1)], undefined)
