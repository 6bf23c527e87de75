"""Feature-space adversarial attacks over normalized feature vectors.

Both attacks maximize the classifier's cross-entropy on the true class
inside the unit box, under a per-feature movement mask derived from the
threat model.  The gradient attack needs an analytic input gradient (the
network); the gradient-free attack estimates coordinate gradients with
central differences and works against the forest as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .features import (
    Field,
    Kind,
    Profile,
    Scope,
    _scoped_gaps_us,
    _scoped_lengths,
    extract,
)
from .flows import Flow, US
from .threat import ThreatKind, ThreatModel


class Mask(IntEnum):
    FREE = 0
    FROZEN = 1
    INCREASE_ONLY = 2


@dataclass(frozen=True)
class AmlConfig:
    """Hyperparameters for the feature-space attacks.

    method "auto" picks the gradient attack for models that expose an
    analytic input gradient and the zeroth-order one otherwise.  zoo_h
    None defers to a per-model default probe radius.
    """

    method: str = "auto"
    alpha: float = 0.02
    steps: int = 100
    restarts: int = 5
    noise: float = 0.05
    zoo_h: float | None = None
    coord_batch: int | None = None

    def __post_init__(self) -> None:
        if self.method not in ("auto", "pgd", "zoo"):
            raise ValueError("method must be auto, pgd, or zoo")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.zoo_h is not None and self.zoo_h <= 0:
            raise ValueError("zoo_h must be > 0")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "steps": self.steps,
            "restarts": self.restarts,
            "noise": self.noise,
            "zoo_h": self.zoo_h,
            "coord_batch": self.coord_batch,
        }

    @classmethod
    def from_dict(cls, raw) -> "AmlConfig":
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__ if k in raw})


def derive_mask(prof: Profile, tm: ThreatModel) -> np.ndarray:
    """Per-feature movement mask implied by the attacker's capabilities.

    End-host attackers leave backward length/count features alone and can
    only grow size-like features (minima excepted: a short injected
    packet lowers them); timing features are free because injection can
    create arbitrarily small gaps.  In-path attackers only add delay on
    their own side, so forward and bidirectional gap statistics are
    nondecreasing, backward gaps are out of reach, and size features are
    frozen.  Rates mix a frozen numerator with a growing denominator,
    which the mask vocabulary cannot pin down, so they stay free and the
    constraint solver arbitrates.
    """
    masks = np.empty(len(prof), dtype=np.int64)
    for i, fs in enumerate(prof):
        if tm.kind is ThreatKind.IN_PATH:
            if fs.field is Field.IAT and fs.scope is Scope.BWD:
                masks[i] = Mask.FROZEN
            elif fs.field is Field.IAT or fs.field in (Field.ACTIVE, Field.IDLE):
                masks[i] = Mask.INCREASE_ONLY if fs.kind in (
                    Kind.SUM, Kind.MIN, Kind.MAX, Kind.MEAN, Kind.MEDIAN
                ) else Mask.FREE
            elif fs.kind is Kind.RATE:
                masks[i] = Mask.FREE
            else:
                masks[i] = Mask.FROZEN
            continue
        # end host
        if fs.field in (Field.IAT, Field.ACTIVE, Field.IDLE):
            masks[i] = Mask.FREE
        elif fs.field is Field.LENGTH:
            if fs.scope is Scope.BWD:
                masks[i] = Mask.FROZEN
            elif fs.kind in (Kind.STD, Kind.UNIQUE, Kind.MIN):
                masks[i] = Mask.FREE
            else:
                masks[i] = Mask.INCREASE_ONLY
        elif fs.kind is Kind.COUNT:
            masks[i] = (
                Mask.FROZEN if fs.scope is Scope.BWD else Mask.INCREASE_ONLY
            )
        elif fs.kind is Kind.RATE:
            masks[i] = Mask.FREE
        elif fs.kind is Kind.BURSTS:
            masks[i] = Mask.FREE
        else:
            masks[i] = Mask.FREE
    return masks


def _raise_min(gaps: list[float], budget: float) -> float:
    """Highest common floor a shared delay budget can buy for a gap series.

    Waterfill: spend budget lifting the smallest gaps until they meet the
    next-smallest, then lift the widened group together.
    """
    vals = sorted(gaps)
    level = vals[0]
    remaining = budget
    for k in range(len(vals)):
        ceiling = vals[k + 1] if k + 1 < len(vals) else math.inf
        width = k + 1
        lift = min(ceiling - level, remaining / width)
        level += lift
        remaining -= lift * width
        if level < ceiling:
            break
    return level


def _lower_max(gaps: list[float], k: int) -> float:
    """Smallest maximum gap reachable by splitting gaps with k insertions.

    Binary search on the target: a gap g needs ceil(g / target) - 1 cuts
    to fit under it.
    """
    top = max(gaps)
    if k <= 0 or top <= 0.0:
        return top
    lo_t, hi_t = top / (k + 1), top
    for _ in range(60):
        mid = (lo_t + hi_t) / 2
        need = sum(math.ceil(g / mid) - 1 for g in gaps if g > mid)
        if need <= k:
            hi_t = mid
        else:
            lo_t = mid
    return hi_t


def reachable_box(flow: Flow, prof: Profile, tm: ThreatModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature raw-value bounds the threat model can actually realize.

    The attacks otherwise roam the full training box and ask the solver
    for values no delay budget or injection cap can produce; every such
    request costs a solver round trip that ends unsat.  Bounds here are
    conservative (never exclude a reachable value) and cheap: exact for
    sums, means, and the waterfilled minimum under delay, loose where the
    interaction is too entangled to bound without solving (std under the
    end-host model, active/idle spans).
    """
    x0 = extract(flow, prof)
    lo = np.full(len(prof), -np.inf)
    hi = np.full(len(prof), np.inf)
    budget_s = float(tm.budget_frac) * flow.duration_us / US

    def victim_ending_gaps(scope):
        # A bidirectional gap that ends at a victim-direction packet is
        # immobile: delay shifts are inherited unchanged at victim packets
        # and insertions push the tail back instead of splitting, so the
        # series minimum can never rise past the smallest such gap.
        if scope is not Scope.BI:
            return []
        times = flow.times_us()
        return [
            (times[j] - times[j - 1]) / US
            for j in range(1, len(times))
            if flow.packets[j].direction is not tm.attacker_direction
        ]

    def delay_only(fs, gaps, base):
        # gaps only widen, and the total widening shares one budget
        if fs.kind is Kind.MEAN:
            return base, base + budget_s / len(gaps)
        if fs.kind is Kind.MIN:
            top = _raise_min(gaps, budget_s)
            pinned = victim_ending_gaps(fs.scope)
            if pinned:
                top = min(top, min(pinned))
            return base, top
        if fs.kind is Kind.STD:
            return max(0.0, base - budget_s), base + budget_s
        # SUM, MAX, MEDIAN all rise by at most the whole budget
        return base, base + budget_s

    for i, fs in enumerate(prof):
        base = x0[i]
        if tm.kind is ThreatKind.IN_PATH:
            if fs.field is Field.IAT and fs.kind is not Kind.BURSTS:
                gaps = [g / US for g in _scoped_gaps_us(flow, fs.scope)]
                if not gaps:
                    lo[i] = hi[i] = base
                else:
                    lo[i], hi[i] = delay_only(fs, gaps, base)
            elif fs.kind is Kind.RATE:
                lo[i] = base / (1.0 + float(tm.budget_frac))
                hi[i] = base
            elif fs.field in (Field.ACTIVE, Field.IDLE) or fs.kind is Kind.BURSTS:
                pass
            else:
                lo[i] = hi[i] = base
            continue
        # end host
        if fs.field is Field.IAT and fs.kind is not Kind.BURSTS:
            gaps = [g / US for g in _scoped_gaps_us(flow, fs.scope)]
            if not gaps:
                continue
            if fs.scope is Scope.BWD and tm.can_inject:
                # a burst inserted between two victim packets pushes the
                # later one back by the whole burst time, which the delay
                # budget does not meter, so these only keep their floor
                lo[i] = 0.0 if fs.kind is Kind.STD else base
                hi[i] = np.inf
            elif fs.scope is Scope.BWD or not tm.can_inject:
                # no injection on this side, so delay semantics apply
                lo[i], hi[i] = delay_only(fs, gaps, base)
            elif fs.kind is Kind.SUM:
                lo[i] = base
            elif fs.kind is Kind.MEAN:
                # k insertions split gaps without changing their sum
                lo[i] = sum(gaps) / (len(gaps) + tm.max_inject)
            elif fs.kind is Kind.MIN:
                lo[i] = min(base, tm.min_iat_us / US)
                hi[i] = _raise_min(gaps, budget_s)
                pinned = victim_ending_gaps(fs.scope)
                if pinned:
                    hi[i] = min(hi[i], min(pinned))
            elif fs.kind is Kind.MAX:
                lo[i] = _lower_max(gaps, tm.max_inject)
        elif fs.field is Field.PACKETS and fs.kind is Kind.COUNT:
            if fs.scope is Scope.BWD:
                lo[i] = hi[i] = base
            else:
                lo[i], hi[i] = base, base + tm.max_inject
        elif fs.field is Field.LENGTH and fs.scope is not Scope.BWD:
            lengths = _scoped_lengths(flow, fs.scope)
            fwd_lengths = _scoped_lengths(flow, Scope.FWD)
            q = int(tm.pad_frac * len(flow.packets))
            headroom = sum(sorted((tm.mtu - v for v in fwd_lengths), reverse=True)[:q])
            floor = min(base, float(tm.min_inject_length)) if tm.can_inject else base
            if fs.kind is Kind.MEAN and lengths:
                peak = sum(lengths) + headroom + tm.max_inject * tm.mtu
                lo[i], hi[i] = floor, peak / (len(lengths) + tm.max_inject)
            elif fs.kind in (Kind.MIN, Kind.MEDIAN):
                lo[i], hi[i] = floor, float(tm.mtu)
            elif fs.kind is Kind.MAX:
                lo[i], hi[i] = base, float(tm.mtu)
            elif fs.kind is Kind.UNIQUE:
                hi[i] = base + tm.max_inject + q
        elif fs.field is Field.BYTES and fs.kind is Kind.SUM and fs.scope is not Scope.BWD:
            lengths = _scoped_lengths(flow, Scope.FWD)
            q = int(tm.pad_frac * len(flow.packets))
            headroom = sum(sorted((tm.mtu - v for v in lengths), reverse=True)[:q])
            lo[i] = base
            hi[i] = base + headroom + tm.max_inject * tm.mtu
    return lo, hi


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    loss: float
    queries: int


def _project(
    x: np.ndarray,
    x0: np.ndarray,
    masks: np.ndarray,
    box: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    lo = np.minimum(0.0, x0)
    hi = np.maximum(1.0, x0)
    if box is not None:
        lo = np.maximum(lo, box[0])
        hi = np.minimum(hi, box[1])
        hi = np.maximum(hi, lo)
    x = np.clip(x, lo, hi)
    x = np.where(masks == Mask.INCREASE_ONLY, np.maximum(x, x0), x)
    x = np.where(masks == Mask.FROZEN, x0, x)
    return x


def _better(candidate: tuple[bool, float], incumbent: tuple[bool, float]) -> bool:
    return candidate > incumbent


def pgd_attack(
    model,
    x0: np.ndarray,
    y_true: int,
    masks: np.ndarray,
    alpha: float = 0.02,
    steps: int = 100,
    restarts: int = 5,
    noise: float = 0.05,
    seed: int = 0,
    box: tuple[np.ndarray, np.ndarray] | None = None,
) -> AttackResult:
    """Projected sign-gradient ascent on the true-class loss.

    Restart 0 starts at the clean point; later restarts jitter the start
    uniformly within `noise`.  The returned point is the best iterate seen
    anywhere, preferring misclassified points, then higher loss.  `box`
    narrows the search to normalized per-feature bounds (see
    `reachable_box`) so iterates stay realizable.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = x0.copy()
    best_key = (False, -np.inf)
    queries = 0
    for r in range(restarts):
        x = x0.copy()
        if r > 0:
            x = _project(x + rng.uniform(-noise, noise, size=x0.shape), x0, masks, box)
        for _ in range(steps):
            g = model.input_gradient(x, np.array([y_true]))[0]
            x = _project(x + alpha * np.sign(g), x0, masks, box)
            queries += 1
            loss = float(model.loss(x, np.array([y_true]))[0])
            pred = int(model.predict(x)[0])
            key = (pred != y_true, loss)
            if _better(key, best_key):
                best_key = key
                best = x.copy()
    return AttackResult(best, best_key[0], best_key[1], queries)


def fd_gradient(model, x: np.ndarray, y_true: int, h: float) -> np.ndarray:
    """Full central-difference estimate of d loss / d x (2n model queries)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    pts = np.repeat(x[None, :], 2 * n, axis=0)
    for i in range(n):
        pts[2 * i, i] += h
        pts[2 * i + 1, i] -= h
    losses = model.loss(pts, np.full(2 * n, y_true))
    return (losses[0::2] - losses[1::2]) / (2.0 * h)


def _default_h(model) -> float:
    return 1e-4 if getattr(model, "kind", "") == "mlp" else 0.05


def zoo_attack(
    model,
    x0: np.ndarray,
    y_true: int,
    masks: np.ndarray,
    alpha: float = 0.02,
    steps: int = 100,
    coord_batch: int | None = None,
    h: float | None = None,
    seed: int = 0,
    box: tuple[np.ndarray, np.ndarray] | None = None,
) -> AttackResult:
    """Zeroth-order sign ascent using batched coordinate finite differences."""
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if h is None:
        h = _default_h(model)
    movable = np.flatnonzero(masks != Mask.FROZEN)
    if movable.size == 0:
        loss = float(model.loss(x0, np.array([y_true]))[0])
        return AttackResult(x0.copy(), False, loss, 1)
    batch = min(coord_batch or 8, movable.size)
    x = x0.copy()
    best = x0.copy()
    best_key = (False, -np.inf)
    queries = 0
    for _ in range(steps):
        coords = rng.choice(movable, size=batch, replace=False)
        pts = np.repeat(x[None, :], 2 * batch, axis=0)
        for j, c in enumerate(coords):
            pts[2 * j, c] += h
            pts[2 * j + 1, c] -= h
        losses = model.loss(pts, np.full(2 * batch, y_true))
        queries += 2 * batch
        ghat = (losses[0::2] - losses[1::2]) / (2.0 * h)
        step = np.zeros_like(x)
        step[coords] = alpha * np.sign(ghat)
        x = _project(x + step, x0, masks, box)
        loss = float(model.loss(x, np.array([y_true]))[0])
        pred = int(model.predict(x)[0])
        queries += 1
        key = (pred != y_true, loss)
        if _better(key, best_key):
            best_key = key
            best = x.copy()
    return AttackResult(best, best_key[0], best_key[1], queries)


def attack_vector(
    model,
    x0,
    y_true,
    masks,
    cfg: AmlConfig | None = None,
    seed: int = 0,
    box: tuple[np.ndarray, np.ndarray] | None = None,
) -> AttackResult:
    """Dispatch per config, defaulting to the gradient attack when the
    model supports it."""
    if cfg is None:
        cfg = AmlConfig()
    method = cfg.method
    if method == "auto":
        method = "pgd" if getattr(model, "kind", "") == "mlp" else "zoo"
    if method == "pgd":
        return pgd_attack(
            model, x0, y_true, masks,
            alpha=cfg.alpha, steps=cfg.steps, restarts=cfg.restarts,
            noise=cfg.noise, seed=seed, box=box,
        )
    return zoo_attack(
        model, x0, y_true, masks,
        alpha=cfg.alpha, steps=cfg.steps,
        coord_batch=cfg.coord_batch, h=cfg.zoo_h, seed=seed, box=box,
    )
