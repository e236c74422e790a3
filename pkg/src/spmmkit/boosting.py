"""Small multiclass gradient-boosted tree ensemble.

Softmax objective, one regression tree per class per round, exact greedy
splits with second-order (Newton) gains and leaves. Thresholds sit at the
midpoint between adjacent distinct feature values, so a split only depends
on the ordering of the training values. Training uses no randomness and is
fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

__all__ = ["Tree", "TreeEnsembleModel", "BoostConfig", "fit_boosted_trees"]


@dataclass
class Tree:
    """Array-encoded binary tree. ``feature[i] == -1`` marks a leaf.

    Samples with ``x[feature] <= threshold`` go left. Leaf ``value`` already
    includes the learning-rate shrinkage.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]

    @property
    def num_nodes(self) -> int:
        return int(self.feature.shape[0])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = ("feature", "left", "right")
        return cls(**{k: np.asarray(d[k], dtype=np.int64 if k in ints else np.float64)
                      for k in ("feature", "threshold", "left", "right", "value", "gain")})


@dataclass
class TreeEnsembleModel:
    """One additive tree list per class; the predicted class is the argmax
    of the summed leaf scores (ties go to the lowest class index)."""

    trees: list[list[Tree]]
    learning_rate: float
    feature_names: list[str]
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.trees)

    @property
    def num_rounds(self) -> int:
        return len(self.trees[0]) if self.trees else 0

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.feature_names):
            raise ValueError(f"model expects {len(self.feature_names)} features, "
                             f"got {X.shape[1]}")
        scores = np.zeros((X.shape[0], self.num_classes))
        for k, class_trees in enumerate(self.trees):
            for t in class_trees:
                scores[:, k] += t.predict(X)
        return scores

    def predict_class(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.raw_scores(X), axis=1)

    def feature_importance(self) -> np.ndarray:
        """Total split gain per feature, normalized to sum to 1 (all zeros if
        no tree ever split)."""
        imp = np.zeros(len(self.feature_names))
        for class_trees in self.trees:
            for t in class_trees:
                split = t.feature >= 0
                np.add.at(imp, t.feature[split], t.gain[split])
        total = imp.sum()
        return imp / total if total > 0 else imp


@dataclass(frozen=True)
class BoostConfig:
    num_rounds: int = 100
    max_depth: int = 4
    min_leaf: int = 5
    learning_rate: float = 0.1
    patience: int = 10
    reg_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_leaf >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _softmax(F: np.ndarray) -> np.ndarray:
    Z = F - F.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _log_loss(F: np.ndarray, y: np.ndarray) -> float:
    Z = F - F.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(y.shape[0]), y].mean())


class _Builder:
    def __init__(self, X, g, h, cfg: BoostConfig):
        self.X, self.g, self.h, self.cfg = X, g, h, cfg
        self.lam = cfg.reg_lambda
        self.nodes: list[list] = []  # [feature, threshold, left, right, value, gain]

    def _score(self, G, H):
        return G * G / (H + self.lam)

    def build(self) -> Tree:
        self._grow(np.arange(self.X.shape[0]), 0)
        cols = list(zip(*self.nodes))
        return Tree(np.asarray(cols[0], dtype=np.int64), np.asarray(cols[1], dtype=np.float64),
                    np.asarray(cols[2], dtype=np.int64), np.asarray(cols[3], dtype=np.int64),
                    np.asarray(cols[4], dtype=np.float64), np.asarray(cols[5], dtype=np.float64))

    def _best_split(self, idx):
        cfg = self.cfg
        n = idx.shape[0]
        G, H = self.g[idx].sum(), self.h[idx].sum()
        parent = self._score(G, H)
        best = (0.0, -1, 0.0, None)
        for f in range(self.X.shape[1]):
            xs = self.X[idx, f]
            order = np.argsort(xs, kind="stable")
            xs = xs[order]
            GL = np.cumsum(self.g[idx][order])[:-1]
            HL = np.cumsum(self.h[idx][order])[:-1]
            left_n = np.arange(1, n)
            ok = (xs[1:] > xs[:-1]) & (left_n >= cfg.min_leaf) & (n - left_n >= cfg.min_leaf)
            if not ok.any():
                continue
            gain = 0.5 * (self._score(GL, HL) + self._score(G - GL, H - HL) - parent)
            gain = np.where(ok, gain, -np.inf)
            i = int(np.argmax(gain))
            if gain[i] > best[0]:
                thr = 0.5 * (xs[i] + xs[i + 1])
                best = (float(gain[i]), f, float(thr), None)
        return best

    def _grow(self, idx, depth) -> int:
        me = len(self.nodes)
        G, H = self.g[idx].sum(), self.h[idx].sum()
        value = -G / (H + self.lam) * self.cfg.learning_rate
        self.nodes.append([-1, 0.0, -1, -1, value, 0.0])
        if depth >= self.cfg.max_depth or idx.shape[0] < 2 * self.cfg.min_leaf:
            return me
        gain, f, thr, _ = self._best_split(idx)
        if f < 0 or gain <= 1e-12:
            return me
        mask = self.X[idx, f] <= thr
        left = self._grow(idx[mask], depth + 1)
        right = self._grow(idx[~mask], depth + 1)
        self.nodes[me] = [f, thr, left, right, value, gain]
        return me


def fit_boosted_trees(X: np.ndarray, y: np.ndarray, num_classes: int, cfg: BoostConfig,
                      feature_names: list[str],
                      X_valid: Optional[np.ndarray] = None,
                      y_valid: Optional[np.ndarray] = None) -> TreeEnsembleModel:
    """Fit the ensemble; early-stop on validation log-loss when a validation
    set is given, keeping the best round."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    Y = np.eye(num_classes)[y]
    F = np.zeros((X.shape[0], num_classes))
    has_valid = X_valid is not None and len(X_valid) > 0
    if has_valid:
        X_valid = np.asarray(X_valid, dtype=np.float64)
        y_valid = np.asarray(y_valid, dtype=np.int64)
        Fv = np.zeros((X_valid.shape[0], num_classes))
    trees: list[list[Tree]] = [[] for _ in range(num_classes)]
    best_loss, best_round, history = np.inf, 0, []
    for rnd in range(cfg.num_rounds):
        P = _softmax(F)
        g = P - Y
        h = np.maximum(P * (1.0 - P), 1e-16)
        for k in range(num_classes):
            tree = _Builder(X, g[:, k], h[:, k], cfg).build()
            trees[k].append(tree)
            F[:, k] += tree.predict(X)
            if has_valid:
                Fv[:, k] += tree.predict(X_valid)
        if has_valid:
            loss = _log_loss(Fv, y_valid)
            history.append(loss)
            if loss < best_loss - 1e-12:
                best_loss, best_round = loss, rnd + 1
            elif rnd + 1 - best_round >= cfg.patience:
                break
        else:
            best_round = rnd + 1
    trees = [t[:best_round] for t in trees]
    meta = {
        "config": cfg.to_dict(),
        "num_classes": num_classes,
        "best_round": best_round,
        "train_loss": _log_loss(sum_scores(trees, X, num_classes), y),
        "valid_loss_history": history,
    }
    return TreeEnsembleModel(trees, cfg.learning_rate, list(feature_names), meta)


def sum_scores(trees: list[list[Tree]], X: np.ndarray, num_classes: int) -> np.ndarray:
    F = np.zeros((X.shape[0], num_classes))
    for k in range(num_classes):
        for t in trees[k]:
            F[:, k] += t.predict(X)
    return F
