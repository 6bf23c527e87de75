"""Couples feature-space attacks to the constraint pipeline.

The walk works on one flow at a time: rank the features the attack moved,
then keep adding the highest-ranked ones to the constraint set for as
long as the solver can still realize the combination.  Every satisfiable
step is carried into a packet-level plan, reconstructed, validated
against the threat model, re-featurized, and re-classified; the variants
pile up until the cap.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .attacks import AmlConfig, attack_vector, derive_mask, reachable_box
from .features import FeatureSpec, Normalizer, SolverClass, extract, profile
from .flows import Dataset, Flow, flow_from_record, flow_to_record
from .smt import (
    Injection,
    PerturbationPlan,
    PlanRealizationError,
    SmtQuery,
    SolveResult,
    SolverConfig,
    SolverFailure,
    TargetBand,
    Verdict,
    build_plan,
    encode,
    reconstruct,
    solve_text,
    validate,
)
from .threat import ThreatModel

SolveFn = Callable[[str], SolveResult]


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the per-flow constraint walk.

    k bounds how many ranked features are considered (None means all of
    them); variant_cap bounds how many realized variants are kept per
    flow.  early_exit stops collecting at the first adversarial variant
    instead of walking the whole ranking.
    """

    k: int | None = None
    band_eps: float = 0.01
    chunk_schedule: tuple[int, ...] = (1, 2, 4, 8)
    variant_cap: int = 30
    early_exit: bool = False
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    aml: AmlConfig = field(default_factory=AmlConfig)

    def __post_init__(self) -> None:
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.band_eps < 1:
            raise ValueError("band_eps must be in [0, 1)")
        if not self.chunk_schedule or self.chunk_schedule[0] != 1:
            raise ValueError("chunk_schedule must start at 1")
        if list(self.chunk_schedule) != sorted(set(self.chunk_schedule)):
            raise ValueError("chunk_schedule must be strictly increasing")
        if self.variant_cap < 1:
            raise ValueError("variant_cap must be >= 1")


def flow_seed(seed: int, flow_id: str) -> int:
    """Stable per-flow RNG seed, independent of visit order."""
    digest = hashlib.sha256(f"{seed}:{flow_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rank_features(x0_norm: np.ndarray, x_adv_norm: np.ndarray) -> list[int]:
    """Feature indices by how far the attack moved them, largest first.

    Ties break toward the lower profile index so the ordering is total.
    """
    delta = np.abs(np.asarray(x_adv_norm, dtype=np.float64) - np.asarray(x0_norm, dtype=np.float64))
    return sorted(range(delta.shape[0]), key=lambda i: (-delta[i], i))


def band_for(spec: FeatureSpec, value: float, eps: float) -> TargetBand:
    """Build a band around an adversarial feature value.

    The float is read through its decimal repr so the target is an exact
    rational; a zero value collapses the band to an equality.
    """
    exact = Fraction(str(value))
    if exact < 0:
        exact = Fraction(0)
    return TargetBand(spec.name, exact, abs(exact) * Fraction(str(eps)))


@dataclass(frozen=True)
class TrialRecord:
    feature: str
    chunks: int
    verdict: str
    kept: bool


@dataclass(frozen=True)
class SatStep:
    """One satisfiable rung of the walk: the accepted set and its models."""

    bands: tuple[TargetBand, ...]
    chunks: int
    queries: tuple[SmtQuery, ...]
    models: tuple[Mapping[str, int], ...]


@dataclass(frozen=True)
class SearchOutcome:
    accepted: tuple[TargetBand, ...]
    steps: tuple[SatStep, ...]
    n_solves: int
    n_timeouts: int
    trace: tuple[TrialRecord, ...]


def _solve_chunks(queries: Sequence[SmtQuery], solve_fn: SolveFn):
    """Solve per-chunk queries, short-circuiting on the first non-sat."""
    models = []
    for query in queries:
        result = solve_fn(query.text)
        if result.verdict is not Verdict.SAT:
            return result.verdict, None, len(models) + 1
        models.append(result.model)
    return Verdict.SAT, tuple(models), len(models)


def iterative_testing(
    flow: Flow,
    prof: Sequence[FeatureSpec],
    candidates: Sequence[TargetBand],
    tm: ThreatModel,
    *,
    solve_fn: SolveFn,
    chunk_schedule: Sequence[int] = (1, 2, 4, 8),
) -> SearchOutcome:
    """Greedy constraint-set growth with solver feedback.

    Candidates are tried in order.  A candidate stays only if the full
    set remains solvable; an unsolvable or undecided combination drops
    it.  A solver timeout escalates the chunk count and retries the same
    combination, and escalation is sticky for the rest of the walk.
    Every satisfiable step is recorded with its solver models.
    """
    n = len(flow.packets)
    schedule = [c for c in chunk_schedule if n // c >= 2]
    if not schedule:
        schedule = [1]
    level = 0
    accepted: list[TargetBand] = []
    steps: list[SatStep] = []
    trace: list[TrialRecord] = []
    n_solves = 0
    n_timeouts = 0

    for band in candidates:
        trial = accepted + [band]
        while True:
            chunks = schedule[level]
            queries = encode(flow, prof, trial, tm, chunks)
            verdict, models, used = _solve_chunks(queries, solve_fn)
            n_solves += used
            if verdict is Verdict.TIMEOUT:
                n_timeouts += 1
                if level + 1 < len(schedule):
                    trace.append(TrialRecord(band.name, chunks, verdict.value, False))
                    level += 1
                    continue
            trace.append(TrialRecord(band.name, chunks, verdict.value, verdict is Verdict.SAT))
            if verdict is Verdict.SAT:
                accepted.append(band)
                steps.append(SatStep(tuple(trial), chunks, tuple(queries), models))
            break

    return SearchOutcome(
        tuple(accepted), tuple(steps), n_solves, n_timeouts, tuple(trace)
    )


class OutcomeStatus(str, Enum):
    ADVERSARIAL_FOUND = "adversarial_found"
    REALIZABLE_ONLY = "realizable_only"
    NONE = "none"


@dataclass(frozen=True)
class Variant:
    """One realized perturbation of an original flow.

    bands carries the exact rational [lo, hi] interval of every selected
    feature as strings, so fidelity can be re-checked after the fact
    without the solver queries.
    """

    flow: Flow
    features: tuple[float, ...]
    pred: str
    adversarial: bool
    selected: tuple[str, ...]
    bands: tuple[tuple[str, str, str], ...]
    chunks: int
    delay_us: int
    injected: int
    padded: int

    def to_dict(self) -> dict:
        return {
            "flow": flow_to_record(self.flow),
            "features": list(self.features),
            "pred": self.pred,
            "adversarial": self.adversarial,
            "selected": list(self.selected),
            "bands": [list(b) for b in self.bands],
            "chunks": self.chunks,
            "delay_us": self.delay_us,
            "injected": self.injected,
            "padded": self.padded,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Variant":
        return cls(
            flow=flow_from_record(raw["flow"]),
            features=tuple(raw["features"]),
            pred=raw["pred"],
            adversarial=raw["adversarial"],
            selected=tuple(raw["selected"]),
            bands=tuple(tuple(b) for b in raw["bands"]),
            chunks=raw["chunks"],
            delay_us=raw["delay_us"],
            injected=raw["injected"],
            padded=raw["padded"],
        )


@dataclass(frozen=True)
class AttackOutcome:
    """Everything the pipeline produced for one original flow."""

    flow_id: str
    label: str
    pred_before: str
    feature_hit: bool
    status: OutcomeStatus
    variants: tuple[Variant, ...]
    selected: tuple[str, ...]
    n_solves: int
    n_timeouts: int
    n_invalid: int
    trace: tuple[TrialRecord, ...] = ()

    @property
    def adversarial(self) -> bool:
        return self.status is OutcomeStatus.ADVERSARIAL_FOUND

    def to_dict(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "label": self.label,
            "pred_before": self.pred_before,
            "feature_hit": self.feature_hit,
            "status": self.status.value,
            "variants": [v.to_dict() for v in self.variants],
            "selected": list(self.selected),
            "n_solves": self.n_solves,
            "n_timeouts": self.n_timeouts,
            "n_invalid": self.n_invalid,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "AttackOutcome":
        return cls(
            flow_id=raw["flow_id"],
            label=raw["label"],
            pred_before=raw["pred_before"],
            feature_hit=raw["feature_hit"],
            status=OutcomeStatus(raw["status"]),
            variants=tuple(Variant.from_dict(v) for v in raw["variants"]),
            selected=tuple(raw["selected"]),
            n_solves=raw["n_solves"],
            n_timeouts=raw["n_timeouts"],
            n_invalid=raw["n_invalid"],
        )


@dataclass(frozen=True)
class AsrReport:
    """Dataset-level attack summary.

    n_flows counts every original; n_attacked only the correctly
    classified ones (the rest are excluded from the rate entirely), and
    each original contributes at most once to n_success.
    """

    profile: str
    threat: str
    n_flows: int
    n_attacked: int
    n_success: int
    per_class: Mapping[str, Mapping[str, int]]
    variant_counts: Mapping[str, int]
    outcomes: tuple[AttackOutcome, ...]

    @property
    def asr(self) -> float:
        if self.n_attacked == 0:
            return 0.0
        return self.n_success / self.n_attacked

    def to_json(self) -> str:
        payload = {
            "profile": self.profile,
            "threat": self.threat,
            "n_flows": self.n_flows,
            "n_attacked": self.n_attacked,
            "n_success": self.n_success,
            "asr": self.asr,
            "per_class": {k: dict(v) for k, v in self.per_class.items()},
            "variant_counts": dict(self.variant_counts),
            "outcomes": [o.to_dict() for o in self.outcomes],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "AsrReport":
        raw = json.loads(text)
        return cls(
            profile=raw["profile"],
            threat=raw["threat"],
            n_flows=raw["n_flows"],
            n_attacked=raw["n_attacked"],
            n_success=raw["n_success"],
            per_class=raw["per_class"],
            variant_counts=raw["variant_counts"],
            outcomes=tuple(AttackOutcome.from_dict(o) for o in raw["outcomes"]),
        )


def _predict_one(model, x_norm: np.ndarray) -> int:
    return int(model.predict(x_norm[None, :])[0])


def attack_flow(
    flow: Flow,
    payload: Mapping,
    tm: ThreatModel,
    cfg: SearchConfig,
    *,
    solve_fn: SolveFn | None = None,
) -> AttackOutcome:
    """Run the whole pipeline on one flow.

    ``payload`` is the mapping produced by ``models.load_model``: the
    classifier plus its classes, profile name, and normalizer.  Every
    satisfiable constraint set becomes a candidate variant; variants
    that fail validation are dropped and counted in n_invalid, never
    emitted.
    """
    model = payload["model"]
    classes: Sequence[str] = payload["classes"]
    prof = profile(payload["profile"])
    norm: Normalizer = payload["normalizer"]
    if solve_fn is None:
        solver_cfg = cfg.solver
        solve_fn = lambda text: solve_text(text, solver_cfg)

    x0 = extract(flow, prof)
    x0n = norm.transform(x0[None, :])[0]
    y = classes.index(flow.label)
    pred_before = _predict_one(model, x0n)

    mask = derive_mask(prof, tm)
    lo_raw, hi_raw = reachable_box(flow, prof, tm)
    box = (norm.transform(lo_raw[None, :])[0], norm.transform(hi_raw[None, :])[0])
    result = attack_vector(
        model, x0n, y, mask, cfg.aml, seed=flow_seed(cfg.seed, flow.id), box=box
    )
    x_advn = result.x_adv
    x_adv = norm.inverse(x_advn[None, :])[0]

    ranked = rank_features(x0n, x_advn)
    if cfg.k is not None:
        ranked = ranked[: cfg.k]
    candidates = []
    for idx in ranked:
        spec = prof[idx]
        if spec.solver_class is SolverClass.RECOMPUTE_ONLY:
            continue
        if x_advn[idx] == x0n[idx]:
            continue
        candidates.append(band_for(spec, float(x_adv[idx]), cfg.band_eps))

    outcome = iterative_testing(
        flow, prof, candidates, tm,
        solve_fn=solve_fn,
        chunk_schedule=cfg.chunk_schedule,
    )

    variants: list[Variant] = []
    n_invalid = 0
    for step in outcome.steps:
        if len(variants) >= cfg.variant_cap:
            break
        try:
            plan = build_plan(flow, prof, step.queries, step.models)
            perturbed = reconstruct(flow, plan)
        except PlanRealizationError:
            n_invalid += 1
            continue
        if not validate(flow, perturbed, tm).ok:
            n_invalid += 1
            continue
        x1 = extract(perturbed, prof)
        x1n = norm.transform(x1[None, :])[0]
        pred = _predict_one(model, x1n)
        adversarial = pred != y
        variants.append(Variant(
            flow=perturbed,
            features=tuple(float(v) for v in x1),
            pred=classes[pred],
            adversarial=adversarial,
            selected=tuple(b.name for b in step.bands),
            bands=tuple((b.name, str(b.lo), str(b.hi)) for b in step.bands),
            chunks=step.chunks,
            delay_us=plan.total_delay_us,
            injected=plan.n_injected,
            padded=len(plan.appends),
        ))
        if cfg.early_exit and adversarial:
            break

    if any(v.adversarial for v in variants):
        status = OutcomeStatus.ADVERSARIAL_FOUND
    elif variants:
        status = OutcomeStatus.REALIZABLE_ONLY
    else:
        status = OutcomeStatus.NONE
    return AttackOutcome(
        flow_id=flow.id,
        label=flow.label,
        pred_before=classes[pred_before],
        feature_hit=result.success,
        status=status,
        variants=tuple(variants),
        selected=tuple(b.name for b in outcome.accepted),
        n_solves=outcome.n_solves,
        n_timeouts=outcome.n_timeouts,
        n_invalid=n_invalid,
        trace=outcome.trace,
    )


def _attack_batch(args) -> list[AttackOutcome]:
    flows, payload, tm, cfg = args
    return [attack_flow(f, payload, tm, cfg) for f in flows]


def attack_dataset(
    ds: Dataset,
    payload: Mapping,
    tm: ThreatModel,
    cfg: SearchConfig,
    *,
    workers: int | None = None,
) -> AsrReport:
    """Attack every correctly-classified flow in the dataset.

    Originally-misclassified flows are excluded from both sides of the
    success rate and are not attacked.  Results are merged in flow-id
    order so the report does not depend on worker scheduling.
    """
    model = payload["model"]
    classes: Sequence[str] = payload["classes"]
    prof = profile(payload["profile"])
    norm: Normalizer = payload["normalizer"]

    flows = sorted(ds.flows, key=lambda f: f.id)
    attackable = []
    for flow in flows:
        x0n = norm.transform(extract(flow, prof)[None, :])[0]
        if _predict_one(model, x0n) == classes.index(flow.label):
            attackable.append(flow)

    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(attackable) < 4:
        outcomes = [attack_flow(f, payload, tm, cfg) for f in attackable]
    else:
        shards = [attackable[i::workers] for i in range(workers)]
        jobs = [(shard, payload, tm, cfg) for shard in shards if shard]
        outcomes = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(_attack_batch, jobs):
                outcomes.extend(batch)
        outcomes.sort(key=lambda o: o.flow_id)

    per_class: dict[str, dict[str, int]] = {}
    counts: dict[str, int] = {}
    for out in outcomes:
        row = per_class.setdefault(out.label, {"attacked": 0, "success": 0})
        row["attacked"] += 1
        row["success"] += int(out.adversarial)
        key = str(len(out.variants))
        counts[key] = counts.get(key, 0) + 1
    return AsrReport(
        profile=payload["profile"],
        threat=tm.kind.value,
        n_flows=len(flows),
        n_attacked=len(outcomes),
        n_success=sum(1 for o in outcomes if o.adversarial),
        per_class=per_class,
        variant_counts=counts,
        outcomes=tuple(outcomes),
    )


def save_outcomes(report: AsrReport, path) -> None:
    """Write the per-flow outcome archive as canonical JSONL."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for out in report.outcomes:
            fh.write(json.dumps(out.to_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_outcomes(path) -> list[AttackOutcome]:
    with open(path, "r", encoding="utf-8") as fh:
        return [AttackOutcome.from_dict(json.loads(line)) for line in fh if line.strip()]


def random_plan(flow: Flow, tm: ThreatModel, rng: np.random.Generator) -> PerturbationPlan:
    """A random perturbation that stays inside the threat model."""
    n = len(flow.packets)
    budget = int(tm.budget_frac * flow.duration_us)
    delays: dict[int, int] = {}
    movable = [
        i for i in range(1, n)
        if flow.packets[i].direction is tm.attacker_direction
    ]
    if movable and budget > 0:
        m = int(rng.integers(1, min(len(movable), 6) + 1))
        picked = rng.choice(len(movable), size=m, replace=False)
        total = int(rng.integers(0, budget + 1))
        if total > 0:
            parts = rng.multinomial(total, np.full(m, 1.0 / m))
            for sel, part in zip(picked, parts):
                if part > 0:
                    delays[movable[int(sel)]] = int(part)

    appends: dict[int, int] = {}
    if tm.can_pad:
        cap = int(tm.pad_frac * n)
        paddable = [
            i for i in range(n)
            if flow.packets[i].direction is tm.attacker_direction
            and flow.packets[i].length < tm.mtu
        ]
        if cap > 0 and paddable:
            count = int(rng.integers(0, min(cap, len(paddable)) + 1))
            for sel in rng.choice(len(paddable), size=count, replace=False):
                idx = paddable[int(sel)]
                room = tm.mtu - flow.packets[idx].length
                appends[idx] = int(rng.integers(1, room + 1))

    injections: tuple[Injection, ...] = ()
    if tm.can_inject and tm.max_inject > 0 and n < tm.max_packets:
        k = int(rng.integers(0, min(tm.max_inject, tm.max_packets - n) + 1))
        if k > 0:
            after = int(rng.integers(0, n))
            gaps = tuple(
                int(g) for g in rng.integers(tm.min_iat_us, 50_000, size=k)
            )
            lengths = tuple(
                int(v) for v in rng.integers(tm.min_inject_length, tm.mtu + 1, size=k)
            )
            injections = (Injection(after, gaps, lengths),)

    return PerturbationPlan(flow.id, delays, appends, injections)


@dataclass(frozen=True)
class BaselineReport:
    threat: str
    n_flows: int
    n_attacked: int
    n_success: int
    plans_per_flow: int

    @property
    def asr(self) -> float:
        if self.n_attacked == 0:
            return 0.0
        return self.n_success / self.n_attacked

    def to_json(self) -> str:
        payload = {
            "threat": self.threat,
            "n_flows": self.n_flows,
            "n_attacked": self.n_attacked,
            "n_success": self.n_success,
            "asr": self.asr,
            "plans_per_flow": self.plans_per_flow,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def random_baseline(
    ds: Dataset,
    payload: Mapping,
    tm: ThreatModel,
    *,
    plans_per_flow: int = 20,
    seed: int = 0,
) -> BaselineReport:
    """Replays random in-model perturbations instead of guided ones.

    A flow counts as attacked when the model got it right originally,
    and as a success when any of the random plans flips the prediction.
    """
    model = payload["model"]
    classes: Sequence[str] = payload["classes"]
    prof = profile(payload["profile"])
    norm: Normalizer = payload["normalizer"]
    n_attacked = 0
    n_success = 0
    for flow in sorted(ds.flows, key=lambda f: f.id):
        x0 = extract(flow, prof)
        x0n = norm.transform(x0[None, :])[0]
        y = classes.index(flow.label)
        if _predict_one(model, x0n) != y:
            continue
        n_attacked += 1
        rng = np.random.default_rng(flow_seed(seed, flow.id))
        for _ in range(plans_per_flow):
            plan = random_plan(flow, tm, rng)
            perturbed = reconstruct(flow, plan)
            report = validate(flow, perturbed, tm)
            if not report.ok:
                raise SolverFailure(
                    f"random plan broke the threat model for {flow.id}: {report.errors}"
                )
            x1 = extract(perturbed, prof)
            x1n = norm.transform(x1[None, :])[0]
            if _predict_one(model, x1n) != y:
                n_success += 1
                break
    return BaselineReport(
        threat=tm.kind.value,
        n_flows=len(ds.flows),
        n_attacked=n_attacked,
        n_success=n_success,
        plans_per_flow=plans_per_flow,
    )
