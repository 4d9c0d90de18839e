"""Volume-level random forest over summary features of slice ratings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .domain import SlicePrediction, argmax_label
from .errors import DegenerateClassError, FormatError, InvalidInputError

N_CLASSES = 3
N_FEATURES = 13
GAIN_TOL = 1e-12
FORMAT_VERSION = 1


def entropy(counts, weights=None) -> float:
    """Entropy in bits of class proportions proportional to ``weights * counts``."""
    w = np.asarray(counts, dtype=np.float64)
    if weights is not None:
        w = w * np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return 0.0
    q = w[w > 0] / total
    return float(-(q * np.log2(q)).sum())


def _entropy_rows(w: np.ndarray) -> np.ndarray:
    """Row-wise entropy of weighted class-mass rows ``[k, classes]``."""
    total = w.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(total > 0, w / total, 0.0)
        terms = np.where(q > 0, q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    return -terms.sum(axis=1)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


def best_split(X: np.ndarray, y: np.ndarray, features=None, class_weights=None,
               sample_weight=None) -> Split | None:
    """Highest weighted information-gain split ``x[f] <= threshold``.

    Candidate thresholds are midpoints of consecutive distinct values. Gains
    within 1e-12 of the best count as ties, resolved by lowest feature index
    and then lowest threshold. Returns None for pure nodes or when every
    candidate feature is constant.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    alpha = np.ones(N_CLASSES) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    sw = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    mass = np.zeros((len(y), N_CLASSES))
    mass[np.arange(len(y)), y] = sw * alpha[y]
    parent = mass.sum(axis=0)
    if np.count_nonzero(parent) <= 1:
        return None
    h_parent = entropy(parent)
    total = parent.sum()
    features = range(X.shape[1]) if features is None else sorted(features)
    candidates: list[tuple[int, float, float]] = []
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cut = np.flatnonzero(xs[1:] > xs[:-1])  # last index of each left group
        if len(cut) == 0:
            continue
        left = np.cumsum(mass[order], axis=0)[cut]
        right = parent - left
        wl, wr = left.sum(axis=1), right.sum(axis=1)
        gain = h_parent - (wl / total) * _entropy_rows(left) - (wr / total) * _entropy_rows(right)
        thresholds = (xs[cut] + xs[cut + 1]) / 2.0
        candidates += [(f, float(t), float(g)) for t, g in zip(thresholds, gain)]
    if not candidates:
        return None
    top = max(g for _, _, g in candidates)
    f, t, g = min((c for c in candidates if c[2] >= top - GAIN_TOL), key=lambda c: (c[0], c[1]))
    return Split(f, t, g)


@dataclass
class ForestConfig:
    n_trees: int = 50
    max_depth: int | None = None
    min_samples_leaf: int = 1
    max_features: str | int | None = "sqrt"
    bootstrap: bool = True
    balanced: bool = True


class DecisionTree:
    """Binary tree stored as a preorder node list.

    Internal node: ``("S", feature, threshold)``; leaf: ``("L", p0, p1, p2)``.
    """

    def __init__(self, nodes: list[tuple] | None = None):
        self.nodes = nodes or []

    def fit(self, X, y, class_weights=None, sample_weight=None, rng: np.random.Generator | None = None,
            max_features: int | None = None, max_depth: int | None = None, min_samples_leaf: int = 1):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=int)
        alpha = np.ones(N_CLASSES) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
        sw = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        n_feat = X.shape[1]
        self.nodes = []

        def grow(idx: np.ndarray, depth: int) -> None:
            mass = np.bincount(y[idx], weights=sw[idx] * alpha[y[idx]], minlength=N_CLASSES)
            split = None
            if (max_depth is None or depth < max_depth) and len(idx) >= 2 * min_samples_leaf:
                feats = None
                if max_features is not None and max_features < n_feat:
                    feats = rng.choice(n_feat, size=max_features, replace=False)
                split = best_split(X[idx], y[idx], feats, alpha, sw[idx])
                if split is None and feats is not None:
                    split = best_split(X[idx], y[idx], None, alpha, sw[idx])
            if split is not None:
                go_left = X[idx, split.feature] <= split.threshold
                if min(go_left.sum(), (~go_left).sum()) < min_samples_leaf:
                    split = None
            if split is None:
                self.nodes.append(("L",) + tuple(float(v) for v in mass / mass.sum()))
                return
            self.nodes.append(("S", int(split.feature), float(split.threshold)))
            grow(idx[go_left], depth + 1)
            grow(idx[~go_left], depth + 1)

        grow(np.arange(len(y)), 0)
        return self

    def _index(self) -> dict[int, tuple[int, int]]:
        """Child positions for each internal node of the preorder list."""
        children: dict[int, tuple[int, int]] = {}

        def walk(pos: int) -> int:
            if self.nodes[pos][0] == "L":
                return pos + 1
            left_end = walk(pos + 1)
            end = walk(left_end)
            children[pos] = (pos + 1, left_end)
            return end

        walk(0)
        return children

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        children = self._index()
        out = np.empty((len(X), N_CLASSES))
        for r, x in enumerate(X):
            pos = 0
            while self.nodes[pos][0] == "S":
                _, f, t = self.nodes[pos]
                left, right = children[pos]
                pos = left if x[f] <= t else right
            out[r] = self.nodes[pos][1:]
        return out


class Forest:
    def __init__(self, trees: list[DecisionTree], class_weights, config: ForestConfig):
        self.trees = trees
        self.class_weights = tuple(float(v) for v in class_weights)
        self.config = config

    def predict_proba(self, X) -> np.ndarray:
        return np.mean([t.predict_proba(X) for t in self.trees], axis=0)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def to_text(self) -> str:
        doc = {
            "format": "mriqa-forest",
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "class_weights": list(self.class_weights),
            "trees": [[list(n) for n in t.nodes] for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "Forest":
        doc = json.loads(text)
        if doc.get("format") != "mriqa-forest" or doc.get("version") != FORMAT_VERSION:
            raise FormatError("not a version-1 forest file")
        trees = [DecisionTree([tuple(n) for n in nodes]) for nodes in doc["trees"]]
        return cls(trees, doc["class_weights"], ForestConfig(**doc["config"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text() + "\n")

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_text(Path(path).read_text())


def _max_features(spec, n_features: int) -> int | None:
    if spec is None:
        return None
    if spec == "sqrt":
        return max(1, int(np.sqrt(n_features)))
    return int(spec)


def fit_forest(features, labels, config: ForestConfig | None = None, seed: int = 0) -> Forest:
    """Bootstrap-aggregated entropy trees; every tree draws from its own seed."""
    from .training import class_weights as balanced

    config = config or ForestConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    counts = np.bincount(y, minlength=N_CLASSES)
    if np.count_nonzero(counts) < 2:
        raise DegenerateClassError("the forest needs at least two classes")
    alpha = np.ones(N_CLASSES)
    if config.balanced:
        present = counts > 0
        alpha[present] = balanced(counts[present])
    tree_seeds = np.random.SeedSequence(seed).generate_state(config.n_trees)
    mf = _max_features(config.max_features, X.shape[1])
    trees = []
    for s in tree_seeds:
        rng = np.random.default_rng(int(s))
        sw = np.bincount(rng.integers(0, len(y), len(y)), minlength=len(y)).astype(float) if config.bootstrap else None
        keep = slice(None) if sw is None else sw > 0
        trees.append(DecisionTree().fit(
            X[keep], y[keep], alpha, None if sw is None else sw[keep], rng, mf,
            config.max_depth, config.min_samples_leaf))
    return Forest(trees, alpha, config)


def volume_features(probabilities) -> np.ndarray:
    """Fixed-length summary of one volume's slice predictions ``[n_slices, 3]``.

    Layout: predicted-class fractions (3), per-class mean (3), min (3) and
    max (3) probability, and the number of maximal runs of consecutive
    fail-predicted slices divided by the slice count. Only the last feature
    depends on slice order.
    """
    P = np.asarray(probabilities, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3 or len(P) == 0:
        raise InvalidInputError(f"expected non-empty [n, 3] probabilities, got {P.shape}")
    labels = P.argmax(axis=1)
    fractions = np.bincount(labels, minlength=3) / len(P)
    fail = labels == 2
    runs = int(fail[0]) + int(np.count_nonzero(fail[1:] & ~fail[:-1]))
    return np.concatenate([fractions, P.mean(axis=0), P.min(axis=0), P.max(axis=0), [runs / len(P)]])


def predict_volume(forest: Forest, features) -> SlicePrediction:
    p = forest.predict_proba(np.asarray(features)[None])[0]
    p = p / p.sum()
    return SlicePrediction(tuple(float(v) for v in p), argmax_label(p))
