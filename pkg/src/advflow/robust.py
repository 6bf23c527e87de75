"""Hardening loop: turn realized variants into training signal.

Each round attacks the current model on the training flows, folds the
variants' re-extracted feature vectors into the training matrix under
the original labels, and retrains.  The module also carries the
comparison baseline (per-batch adversarial replacement during SGD) and
the cross-model transfer measurement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .features import Normalizer, extract, extract_matrix, profile
from .flows import Dataset
from .models import MlpClassifier, accuracy, weighted_f1
from .search import SearchConfig, attack_dataset
from .threat import ThreatModel


class RetrainMode(str, Enum):
    FINE_TUNE = "fine_tune"
    FROM_SCRATCH = "from_scratch"


@dataclass(frozen=True)
class RobustifyConfig:
    """Rounds and retraining recipe for the hardening loop.

    Forests always retrain from scratch regardless of mode (there is no
    incremental CART); the mode only matters for the network.
    train_epochs is the recipe the vanilla model was trained with, used
    by FROM_SCRATCH so an empty augmentation reproduces it exactly.
    """

    rounds: int = 3
    include_non_adversarial: bool = True
    mode: RetrainMode = RetrainMode.FINE_TUNE
    fine_tune_epochs: int = 50
    train_epochs: int = 200
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.fine_tune_epochs < 1 or self.train_epochs < 1:
            raise ValueError("epoch counts must be >= 1")


@dataclass(frozen=True)
class TrainingRound:
    """Log entry for one hardening round."""

    index: int
    augmented_size: int
    n_new_vectors: int
    accuracy: float
    weighted_f1: float
    asr: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "augmented_size": self.augmented_size,
            "n_new_vectors": self.n_new_vectors,
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "asr": self.asr,
        }


@dataclass(frozen=True)
class RoundLog:
    initial_accuracy: float
    initial_f1: float
    initial_asr: float
    rounds: tuple[TrainingRound, ...]

    def to_json(self) -> str:
        payload = {
            "initial_accuracy": self.initial_accuracy,
            "initial_f1": self.initial_f1,
            "initial_asr": self.initial_asr,
            "rounds": [r.to_dict() for r in self.rounds],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def robustness_improvement(asr_vanilla: float, asr_robust: float) -> float:
    """Relative drop in success rate; undefined when the vanilla rate is 0."""
    if asr_vanilla <= 0:
        raise ValueError("robustness improvement is undefined for a zero vanilla rate")
    return (asr_vanilla - asr_robust) / asr_vanilla


def _variant_vectors(report, classes, include_non_adversarial):
    """(vector, label index) pairs from an attack report's variants."""
    pairs = []
    for out in report.outcomes:
        y = classes.index(out.label)
        for variant in out.variants:
            if not variant.adversarial and not include_non_adversarial:
                continue
            pairs.append((np.asarray(variant.features, dtype=np.float64), y))
    return pairs


def _retrain(model, Xn, y, cfg: RobustifyConfig, seed: int):
    if getattr(model, "kind", "") == "mlp":
        if cfg.mode is RetrainMode.FINE_TUNE:
            return model.fit(Xn, y, epochs=cfg.fine_tune_epochs, seed=seed)
        fresh = MlpClassifier(model.n_features, model.n_classes, seed=seed)
        return fresh.fit(Xn, y, epochs=cfg.train_epochs, seed=seed)
    fresh = type(model)(model.n_features, model.n_classes)
    return fresh.fit(Xn, y, seed=seed)


def robustify(
    model,
    train: Dataset,
    test: Dataset,
    payload: Mapping,
    tm: ThreatModel,
    cfg: RobustifyConfig,
    seed: int = 0,
    *,
    workers: int | None = None,
    checkpoint=None,
):
    """Harden a trained model against the attack pipeline.

    Returns (model, RoundLog).  Per round: attack the current model on
    the training flows, add every realizable variant's re-extracted
    feature vector labeled with the original flow's label (only
    validated variants ever exist, which is what licenses the label),
    deduplicate exact repeats, retrain, and measure clean metrics plus
    the post-round success rate on the test flows.  A round that yields
    no new vectors retrains nothing.  checkpoint, when given, is called
    with (round index, model) after every round.
    """
    classes: Sequence[str] = payload["classes"]
    prof = profile(payload["profile"])
    norm: Normalizer = payload["normalizer"]

    X_train = norm.transform(extract_matrix(train.flows, prof))
    y_train = np.array([classes.index(f.label) for f in train.flows], dtype=np.int64)
    X_test = norm.transform(extract_matrix(test.flows, prof))
    y_test = np.array([classes.index(f.label) for f in test.flows], dtype=np.int64)

    def clean_metrics(m):
        pred = m.predict(X_test)
        return accuracy(y_test, pred), weighted_f1(y_test, pred, len(classes))

    def asr_of(m):
        live = dict(payload)
        live["model"] = m
        return attack_dataset(test, live, tm, cfg.search, workers=workers).asr

    current = model
    acc0, f10 = clean_metrics(current)
    asr0 = asr_of(current)

    seen: set[bytes] = set()
    for row in X_train:
        seen.add(row.tobytes())
    extra_X: list[np.ndarray] = []
    extra_y: list[int] = []
    rounds: list[TrainingRound] = []

    for index in range(1, cfg.rounds + 1):
        live = dict(payload)
        live["model"] = current
        report = attack_dataset(train, live, tm, cfg.search, workers=workers)
        fresh = 0
        for vec, label in _variant_vectors(report, classes, cfg.include_non_adversarial):
            vec_n = norm.transform(vec[None, :])[0]
            key = vec_n.tobytes()
            if key in seen:
                continue
            seen.add(key)
            extra_X.append(vec_n)
            extra_y.append(label)
            fresh += 1
        if fresh > 0:
            Xa = np.vstack([X_train, np.array(extra_X)])
            ya = np.concatenate([y_train, np.array(extra_y, dtype=np.int64)])
            current = _retrain(current, Xa, ya, cfg, seed)
        acc, f1 = clean_metrics(current)
        rounds.append(TrainingRound(
            index=index,
            augmented_size=len(y_train) + len(extra_y),
            n_new_vectors=fresh,
            accuracy=acc,
            weighted_f1=f1,
            asr=asr_of(current),
        ))
        if checkpoint is not None:
            checkpoint(index, current)

    log = RoundLog(acc0, f10, asr0, tuple(rounds))
    return current, log


def adversarial_training(
    train: Dataset,
    test: Dataset,
    payload: Mapping,
    *,
    epochs: int = 200,
    pgd_steps: int = 10,
    alpha: float = 0.05,
    seed: int = 0,
):
    """Classic per-batch adversarial training baseline, network only.

    Every SGD minibatch is replaced by PGD perturbations of itself
    inside the unit box with no threat-model mask, which is exactly why
    it trades clean accuracy away: the model learns regions no real
    flow occupies.  Returns (model, clean_accuracy).
    """
    classes: Sequence[str] = payload["classes"]
    prof = profile(payload["profile"])
    norm: Normalizer = payload["normalizer"]
    X = norm.transform(extract_matrix(train.flows, prof))
    y = np.array([classes.index(f.label) for f in train.flows], dtype=np.int64)
    X_test = norm.transform(extract_matrix(test.flows, prof))
    y_test = np.array([classes.index(f.label) for f in test.flows], dtype=np.int64)

    model = MlpClassifier(X.shape[1], len(classes), seed=seed)

    def hook(xb, yb):
        x = xb.copy()
        for _ in range(pgd_steps):
            g = model.input_gradient(x, yb)
            x = np.clip(x + alpha * np.sign(g), 0.0, 1.0)
        return x

    model.fit(X, y, epochs=epochs, seed=seed, batch_hook=hook)
    return model, accuracy(y_test, model.predict(X_test))


@dataclass(frozen=True)
class TransferMatrix:
    """Cross-model replay grid; None cells mean no jointly-correct flows."""

    names: tuple[str, ...]
    cells: Mapping[str, Mapping[str, float | None]]
    sizes: Mapping[str, Mapping[str, int]]

    def to_csv(self) -> str:
        lines = ["source,target,transfer_asr,n_flows"]
        for src in self.names:
            for dst in self.names:
                cell = self.cells[src][dst]
                value = "n/a" if cell is None else f"{cell:.6f}"
                lines.append(f"{src},{dst},{value},{self.sizes[src][dst]}")
        return "\n".join(lines) + "\n"


def transferability(
    named_payloads: Sequence[tuple[str, Mapping]],
    ds: Dataset,
    tm: ThreatModel,
    cfg: SearchConfig,
    *,
    workers: int | None = None,
) -> TransferMatrix:
    """Attack each source model and replay its variants through each target.

    A cell is the fraction of jointly-correctly-classified flows whose
    attack on the source produced at least one variant that also fools
    the target, so the diagonal equals the direct success rate on that
    subset.  Cells over different subsets are not directly comparable.
    """
    if len(named_payloads) < 2:
        raise ValueError("transferability needs at least two models")
    names = tuple(name for name, _ in named_payloads)
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")

    correct: dict[str, set[str]] = {}
    for name, payload in named_payloads:
        model = payload["model"]
        classes = payload["classes"]
        prof = profile(payload["profile"])
        norm = payload["normalizer"]
        got = set()
        for flow in ds.flows:
            xn = norm.transform(extract(flow, prof)[None, :])[0]
            if int(model.predict(xn[None, :])[0]) == classes.index(flow.label):
                got.add(flow.id)
        correct[name] = got

    cells: dict[str, dict[str, float | None]] = {name: {} for name in names}
    sizes: dict[str, dict[str, int]] = {name: {} for name in names}
    payload_of = dict(named_payloads)
    attack_cache: dict[tuple[str, frozenset], object] = {}
    for src in names:
        for dst in names:
            joint = correct[src] & correct[dst]
            sizes[src][dst] = len(joint)
            if not joint:
                cells[src][dst] = None
                continue
            cache_key = (src, frozenset(joint))
            report = attack_cache.get(cache_key)
            if report is None:
                subset = Dataset(
                    tuple(f for f in ds.flows if f.id in joint),
                    ds.classes,
                )
                report = attack_dataset(subset, payload_of[src], tm, cfg, workers=workers)
                attack_cache[cache_key] = report
            target = payload_of[dst]
            t_model = target["model"]
            t_classes = target["classes"]
            t_norm = target["normalizer"]
            fooled = 0
            for out in report.outcomes:
                y = t_classes.index(out.label)
                hit = False
                for variant in out.variants:
                    if not variant.adversarial:
                        continue
                    vec = np.asarray(variant.features, dtype=np.float64)
                    vn = t_norm.transform(vec[None, :])[0]
                    if int(t_model.predict(vn[None, :])[0]) != y:
                        hit = True
                        break
                fooled += int(hit)
            cells[src][dst] = fooled / len(joint)
    return TransferMatrix(names, cells, sizes)
