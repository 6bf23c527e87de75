"""Feature-vector classifiers trained from scratch on numpy.

Two model families cover the gradient and gradient-free attack paths: a
small fully-connected network with analytic input gradients, and a random
forest of Gini-split CART trees.  Both serialize to JSON checkpoints.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def _one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((y.size, n_classes), dtype=np.float64)
    out[np.arange(y.size), y] = 1.0
    return out


def accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty label array")
    return float(np.mean(y_true == y_pred))


def weighted_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Support-weighted one-vs-rest F1; per-class F1 is 0 when undefined."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    total = y_true.size
    if total == 0:
        raise ValueError("empty label array")
    score = 0.0
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        support = tp + fn
        if support == 0:
            continue
        denom = 2 * tp + fp + fn
        f1 = (2 * tp / denom) if denom > 0 else 0.0
        score += (support / total) * f1
    return float(score)


class MlpClassifier:
    """Four hidden layers of 200 ReLU units; softmax (sigmoid when binary).

    Trained with plain minibatch SGD.  `input_gradient` backpropagates the
    cross-entropy loss all the way to the input vector, which is what the
    gradient attack consumes.
    """

    kind = "mlp"
    HIDDEN = (200, 200, 200, 200)

    def __init__(self, n_features: int, n_classes: int, seed: int = 0):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.n_features = n_features
        self.n_classes = n_classes
        self.binary = n_classes == 2
        n_out = 1 if self.binary else n_classes
        rng = np.random.default_rng(seed)
        dims = (n_features, *self.HIDDEN, n_out)
        self.weights = [
            rng.normal(0.0, math.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1]))
            for i in range(len(dims) - 1)
        ]
        self.biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
        self.history_: list[float] = []

    def _forward(self, X: np.ndarray):
        acts = [X]
        h = X
        for i in range(len(self.weights) - 1):
            h = np.maximum(0.0, h @ self.weights[i] + self.biases[i])
            acts.append(h)
        z = h @ self.weights[-1] + self.biases[-1]
        return acts, z

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        _, z = self._forward(X)
        if self.binary:
            p = 1.0 / (1.0 + np.exp(-z[:, 0]))
            return np.column_stack([1.0 - p, p])
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def loss(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample cross-entropy of the true class."""
        p = self.predict_proba(X)
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        return -np.log(np.clip(p[np.arange(y.size), y], 1e-12, None))

    def _output_delta(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.binary:
            p = 1.0 / (1.0 + np.exp(-z))
            return p - y.reshape(-1, 1).astype(np.float64)
        zs = z - z.max(axis=1, keepdims=True)
        e = np.exp(zs)
        p = e / e.sum(axis=1, keepdims=True)
        return p - _one_hot(y, self.n_classes)

    def fit(
        self,
        X: np.ndarray,
        y: np.ndarray,
        epochs: int = 200,
        lr: float = 0.01,
        batch_size: int = 32,
        seed: int = 0,
        batch_hook=None,
    ) -> "MlpClassifier":
        """Minibatch SGD; calling fit again continues from current weights.

        batch_hook, when given, maps (xb, yb) to replacement inputs right
        before the gradient step (adversarial training style).
        """
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] != y.size:
            raise ValueError("X and y disagree on sample count")
        rng = np.random.default_rng(seed)
        n = X.shape[0]
        for _ in range(epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                xb, yb = X[idx], y[idx]
                if batch_hook is not None:
                    xb = batch_hook(xb, yb)
                acts, z = self._forward(xb)
                delta = self._output_delta(z, yb) / len(idx)
                grads_w = []
                grads_b = []
                for i in range(len(self.weights) - 1, -1, -1):
                    grads_w.append(acts[i].T @ delta)
                    grads_b.append(delta.sum(axis=0))
                    if i > 0:
                        delta = (delta @ self.weights[i].T) * (acts[i] > 0)
                grads_w.reverse()
                grads_b.reverse()
                for i in range(len(self.weights)):
                    self.weights[i] -= lr * grads_w[i]
                    self.biases[i] -= lr * grads_b[i]
                epoch_loss += float(np.sum(self.loss(xb, yb)))
            self.history_.append(epoch_loss / n)
        return self

    def input_gradient(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d loss / d input for each row, via analytic backprop."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        acts, z = self._forward(X)
        delta = self._output_delta(z, y)
        for i in range(len(self.weights) - 1, 0, -1):
            delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return delta @ self.weights[0].T

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, data: dict) -> "MlpClassifier":
        model = cls(data["n_features"], data["n_classes"])
        model.weights = [np.array(w, dtype=np.float64) for w in data["weights"]]
        model.biases = [np.array(b, dtype=np.float64) for b in data["biases"]]
        return model


class _TreeBuilder:
    def __init__(self, rng: np.random.Generator, n_classes: int, max_depth: int,
                 max_features: int, min_samples_split: int):
        self.rng = rng
        self.n_classes = n_classes
        self.max_depth = max_depth
        self.max_features = max_features
        self.min_samples_split = min_samples_split

    def _leaf(self, y: np.ndarray) -> dict:
        counts = np.bincount(y, minlength=self.n_classes).astype(np.float64)
        return {"dist": (counts / counts.sum()).tolist()}

    @staticmethod
    def _gini(counts: np.ndarray) -> float:
        total = counts.sum()
        if total == 0:
            return 0.0
        p = counts / total
        return float(1.0 - np.sum(p * p))

    def _best_split(self, X: np.ndarray, y: np.ndarray):
        n, d = X.shape
        features = self.rng.choice(d, size=min(self.max_features, d), replace=False)
        parent_counts = np.bincount(y, minlength=self.n_classes)
        best = None  # (impurity, feature, threshold)
        for f in sorted(features.tolist()):
            order = np.argsort(X[:, f], kind="stable")
            xs, ys = X[order, f], y[order]
            left = np.zeros(self.n_classes)
            right = parent_counts.astype(np.float64).copy()
            for i in range(n - 1):
                left[ys[i]] += 1
                right[ys[i]] -= 1
                if xs[i] == xs[i + 1]:
                    continue
                n_left = i + 1
                n_right = n - n_left
                score = (n_left * self._gini(left) + n_right * self._gini(right)) / n
                if best is None or score < best[0] - 1e-12:
                    best = (score, f, (xs[i] + xs[i + 1]) / 2.0)
        return best

    def build(self, X: np.ndarray, y: np.ndarray, depth: int = 0) -> dict:
        if (
            depth >= self.max_depth
            or y.size < self.min_samples_split
            or np.unique(y).size == 1
        ):
            return self._leaf(y)
        parent = self._gini(np.bincount(y, minlength=self.n_classes).astype(np.float64))
        best = self._best_split(X, y)
        if best is None or best[0] >= parent - 1e-12:
            return self._leaf(y)
        _, f, thr = best
        mask = X[:, f] <= thr
        return {
            "feature": int(f),
            "threshold": float(thr),
            "left": self.build(X[mask], y[mask], depth + 1),
            "right": self.build(X[~mask], y[~mask], depth + 1),
        }


def _tree_proba(node: dict, X: np.ndarray, out: np.ndarray, idx: np.ndarray) -> None:
    if "dist" in node:
        out[idx] = node["dist"]
        return
    mask = X[idx, node["feature"]] <= node["threshold"]
    if mask.any():
        _tree_proba(node["left"], X, out, idx[mask])
    if (~mask).any():
        _tree_proba(node["right"], X, out, idx[~mask])


class ForestClassifier:
    """Bagged CART trees with sqrt-width feature subsampling at each split.

    Prediction averages the leaf class distributions across trees, so the
    scores move smoothly enough for coordinate-wise finite differences.
    """

    kind = "forest"

    def __init__(self, n_features: int, n_classes: int):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.n_features = n_features
        self.n_classes = n_classes
        self.trees: list[dict] = []

    def fit(
        self,
        X: np.ndarray,
        y: np.ndarray,
        n_trees: int = 100,
        max_depth: int = 12,
        min_samples_split: int = 2,
        bootstrap: bool = True,
        seed: int = 0,
    ) -> "ForestClassifier":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n, d = X.shape
        if d != self.n_features:
            raise ValueError("X width does not match n_features")
        rng = np.random.default_rng(seed)
        max_feat = max(1, int(math.sqrt(d)))
        self.trees = []
        for _ in range(n_trees):
            if bootstrap:
                idx = rng.integers(0, n, size=n)
            else:
                idx = np.arange(n)
            builder = _TreeBuilder(rng, self.n_classes, max_depth, max_feat,
                                   min_samples_split)
            self.trees.append(builder.build(X[idx], y[idx]))
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise RuntimeError("forest is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        total = np.zeros((X.shape[0], self.n_classes))
        idx = np.arange(X.shape[0])
        for tree in self.trees:
            out = np.zeros((X.shape[0], self.n_classes))
            _tree_proba(tree, X, out, idx)
            total += out
        return total / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def loss(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.predict_proba(X)
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        return -np.log(np.clip(p[np.arange(y.size), y], 1e-12, None))

    def input_gradient(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise TypeError("forest classifiers have no input gradient; use the "
                        "gradient-free attack instead")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "trees": self.trees,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ForestClassifier":
        model = cls(data["n_features"], data["n_classes"])
        model.trees = data["trees"]
        return model


def save_model(path: str | Path, model, classes: list[str], profile_name: str,
               normalizer) -> None:
    """Write a self-contained checkpoint: model, class names, scaler."""
    payload = {
        "model": model.to_json(),
        "classes": list(classes),
        "profile": profile_name,
        "normalizer": normalizer.to_json(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_model(path: str | Path):
    """Inverse of `save_model`; returns (model, classes, profile_name, normalizer)."""
    from .features import Normalizer

    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    data = payload["model"]
    if data["kind"] == "mlp":
        model = MlpClassifier.from_json(data)
    elif data["kind"] == "forest":
        model = ForestClassifier.from_json(data)
    else:
        raise ValueError(f"unknown model kind {data['kind']!r}")
    normalizer = Normalizer.from_json(payload["normalizer"])
    return model, list(payload["classes"]), payload["profile"], normalizer


def load_payload(path: str | Path) -> dict:
    """Like `load_model`, but shaped for the attack pipeline."""
    model, classes, profile_name, normalizer = load_model(path)
    return {
        "model": model,
        "classes": classes,
        "profile": profile_name,
        "normalizer": normalizer,
    }
