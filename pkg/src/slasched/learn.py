"""Binary decision trees over feature vectors (C4.5-style induction).

Every split is ``feature <= threshold``, with thresholds at midpoints between
adjacent distinct training values.  The default criterion follows J48: among
the candidate splits whose information gain is at least the mean gain, take
the one with the highest gain ratio.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import TrainingSample, action_label, action_order, parse_action
from .graph import Action

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeParams:
    min_leaf: int = 2
    max_depth: int | None = None
    criterion: str = "gain_ratio"  # or "gini"
    prune: bool = False
    prune_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.criterion not in ("gain_ratio", "gini"):
            raise ValueError(f"unknown split criterion {self.criterion!r}")
        if not 0 < self.prune_fraction < 1:
            raise ValueError("prune_fraction must be in (0, 1)")

    def to_dict(self):
        return {"min_leaf": self.min_leaf, "max_depth": self.max_depth, "criterion": self.criterion,
                "prune": self.prune, "prune_fraction": self.prune_fraction, "seed": self.seed}


@dataclass
class Node:
    label: Action                 # majority label, also used when this is a leaf
    feature: int | None = None
    threshold: float | None = None
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class DecisionTree:
    root: Node
    n_features: int
    feature_names: list[str] = field(default_factory=list)

    @property
    def height(self) -> int:
        def h(n):
            return 1 if n.is_leaf else 1 + max(h(n.left), h(n.right))
        return h(self.root)

    @property
    def n_leaves(self) -> int:
        def c(n):
            return 1 if n.is_leaf else c(n.left) + c(n.right)
        return c(self.root)

    def predict(self, fv: Sequence[float]) -> Action:
        if len(fv) != self.n_features:
            raise ValueError(f"feature vector has length {len(fv)}, tree expects {self.n_features}")
        n = self.root
        while n.feature is not None:
            n = n.left if fv[n.feature] <= n.threshold else n.right
        return n.label

    def accuracy(self, samples: Sequence[TrainingSample]) -> float:
        if not samples:
            return 1.0
        return sum(self.predict(s.features) == s.label for s in samples) / len(samples)

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        def enc(n):
            if n.is_leaf:
                return {"action": action_label(n.label)}
            return {"feature": n.feature, "threshold": n.threshold, "majority": action_label(n.label),
                    "left": enc(n.left), "right": enc(n.right)}
        return {"version": FORMAT_VERSION, "feature_names": list(self.feature_names),
                "n_features": self.n_features, "root": enc(self.root)}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported tree format version {d.get('version')!r}")

        def dec(x):
            if "action" in x:
                return Node(parse_action(x["action"]))
            return Node(parse_action(x["majority"]), int(x["feature"]), float(x["threshold"]),
                        dec(x["left"]), dec(x["right"]))
        return cls(dec(d["root"]), int(d["n_features"]), list(d.get("feature_names", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "DecisionTree":
        return cls.from_dict(json.loads(s))


# ---------------------------------------------------------------------------
# induction
# ---------------------------------------------------------------------------


def _entropy(counts: np.ndarray) -> np.ndarray:
    """Entropy (bits) of each row of class counts."""
    tot = counts.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tot > 0, counts / tot, 0.0)
        lg = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -(p * lg).sum(axis=-1)


def _gini(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tot > 0, counts / tot, 0.0)
    return 1.0 - (p * p).sum(axis=-1)


class _Builder:
    def __init__(self, X: np.ndarray, y: np.ndarray, n_classes: int, params: TreeParams, classes):
        self.X, self.y, self.k, self.params, self.classes = X, y, n_classes, params, classes

    def majority(self, idx) -> int:
        # classes are sorted by action order, so argmax's first hit is the tie-break
        return int(np.argmax(np.bincount(self.y[idx], minlength=self.k)))

    def best_split(self, idx):
        """(feature, threshold) or None."""
        X, y, k = self.X[idx], self.y[idx], self.k
        n = len(idx)
        ml = self.params.min_leaf
        parent = np.bincount(y, minlength=k)
        gini = self.params.criterion == "gini"
        imp_parent = (_gini if gini else _entropy)(parent[None, :])[0]
        cands = []  # (gain, ratio, feature, threshold)
        fallback = None
        for f in range(X.shape[1]):
            order = np.argsort(X[:, f], kind="stable")
            xs = X[order, f]
            # split positions: between i-1 and i where values differ
            pos = np.nonzero(xs[1:] != xs[:-1])[0] + 1
            pos = pos[(pos >= ml) & (pos <= n - ml)]
            if not len(pos):
                continue
            onehot = np.zeros((n, k))
            onehot[np.arange(n), y[order]] = 1.0
            cum = np.cumsum(onehot, axis=0)
            left = cum[pos - 1]
            right = parent[None, :] - left
            nl = pos.astype(float)
            nr = n - nl
            imp = _gini if gini else _entropy
            gain = imp_parent - (nl * imp(left) + nr * imp(right)) / n
            j = int(np.argmax(gain))
            lo, hi = float(xs[pos[j] - 1]), float(xs[pos[j]])
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo  # adjacent floats: the midpoint rounds onto hi
            if not np.isfinite(thr):
                continue
            if fallback is None:
                fallback = (f, thr)
            g = float(gain[j])
            if gini:
                ratio = g
            else:
                pl, pr = nl[j] / n, nr[j] / n
                split_info = -(pl * np.log2(pl) + pr * np.log2(pr))
                ratio = g / split_info if split_info > 0 else 0.0
            cands.append((g, ratio, f, thr))
        if not cands:
            return None
        useful = [c for c in cands if c[0] > 1e-12]
        if not useful:
            # impure but no single split helps (e.g. XOR); split anyway so
            # that distinct, consistent samples can still be separated
            return fallback
        if gini:
            best = max(useful, key=lambda c: (c[0], -c[2]))
        else:
            mean_gain = sum(c[0] for c in useful) / len(useful)
            pool = [c for c in useful if c[0] >= mean_gain - 1e-12]
            best = max(pool, key=lambda c: (c[1], -c[2]))
        return best[2], best[3]

    def build(self, idx, depth) -> Node:
        label = self.classes[self.majority(idx)]
        p = self.params
        y = self.y[idx]
        if (y == y[0]).all() or len(idx) < 2 * p.min_leaf or (
                p.max_depth is not None and depth >= p.max_depth):
            return Node(label)
        s = self.best_split(idx)
        if s is None:
            return Node(label)
        f, thr = s
        mask = self.X[idx, f] <= thr
        return Node(label, f, thr, self.build(idx[mask], depth + 1), self.build(idx[~mask], depth + 1))


def fit(samples: Sequence[TrainingSample], params: TreeParams | None = None,
        feature_names: Sequence[str] | None = None) -> DecisionTree:
    if not samples:
        raise ValueError("cannot fit a tree on an empty sample set")
    params = params or TreeParams()
    width = len(samples[0].features)
    if any(len(s.features) != width for s in samples):
        raise ValueError("feature vectors differ in length")
    train, held = list(samples), []
    if params.prune and len(samples) >= 4:
        rng = random.Random(params.seed)
        order = list(range(len(samples)))
        rng.shuffle(order)
        cut = max(1, int(len(samples) * params.prune_fraction))
        held = [samples[i] for i in sorted(order[:cut])]
        train = [samples[i] for i in sorted(order[cut:])]
    classes = sorted({s.label for s in train}, key=action_order)
    cid = {c: i for i, c in enumerate(classes)}
    X = np.array([s.features for s in train], dtype=float).reshape(len(train), width)
    y = np.array([cid[s.label] for s in train], dtype=int)
    b = _Builder(X, y, len(classes), params, classes)
    root = b.build(np.arange(len(train)), 1)
    tree = DecisionTree(root, width, list(feature_names or []))
    if held:
        reduced_error_prune(tree, held)
    return tree


def reduced_error_prune(tree: DecisionTree, samples: Sequence[TrainingSample]) -> DecisionTree:
    """Bottom-up: replace a subtree by a leaf with its majority label whenever
    that does not lower accuracy on ``samples``.  Modifies ``tree`` in place."""

    def errors(n, subset):
        return sum(tree_predict(n, s.features) != s.label for s in subset)

    def rec(n, subset):
        if n.is_leaf:
            return
        left = [s for s in subset if s.features[n.feature] <= n.threshold]
        right = [s for s in subset if s.features[n.feature] > n.threshold]
        rec(n.left, left)
        rec(n.right, right)
        as_leaf = sum(s.label != n.label for s in subset)
        if as_leaf <= errors(n, subset):
            n.feature = n.threshold = n.left = n.right = None

    rec(tree.root, list(samples))
    return tree


def tree_predict(node: Node, fv: Sequence[float]) -> Action:
    while node.feature is not None:
        node = node.left if fv[node.feature] <= node.threshold else node.right
    return node.label


def predict(tree: DecisionTree, fv: Sequence[float]) -> Action:
    return tree.predict(fv)


def leaf(action: Action) -> Node:
    return Node(action)


def split(feature: int, threshold: float, left: Node, right: Node) -> Node:
    """Internal node for hand-built trees; its majority label is the left
    child's."""
    return Node(left.label, feature, threshold, left, right)
