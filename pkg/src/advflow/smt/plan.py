"""Turn solver models into concrete packet edits, and check realizability.

The solver hands back aggregates (total injected time, total padded
bytes, ...).  ``build_plan`` distributes them deterministically onto
packets with a max-first waterfill, trying the pin variants recorded by
the encoder until the chunk's feature bands verify exactly in rational
arithmetic.  ``reconstruct`` applies a plan; ``validate`` checks any
original/perturbed pair against a threat model without seeing the plan.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

from ..features import Field, Kind, Profile, Scope, SolverClass
from ..flows import Direction, Flow, Packet, US
from ..threat import ThreatKind, ThreatModel
from .encode import ChunkContext, PinOption, SmtQuery, TargetBand


class PlanRealizationError(RuntimeError):
    """A solver model could not be turned into a verifying packet edit."""


@dataclass(frozen=True)
class Injection:
    after: int  # index of the packet the burst follows
    gaps_us: tuple[int, ...]
    lengths: tuple[int, ...]


@dataclass(frozen=True)
class PerturbationPlan:
    flow_id: str
    delays_us: dict[int, int] = field(default_factory=dict)
    appends: dict[int, int] = field(default_factory=dict)
    injections: tuple[Injection, ...] = ()

    @property
    def total_delay_us(self) -> int:
        return sum(self.delays_us.values())

    @property
    def n_injected(self) -> int:
        return sum(len(i.gaps_us) for i in self.injections)

    @property
    def is_noop(self) -> bool:
        return not self.delays_us and not self.appends and not self.injections


def waterfill(total: int, slots: int, lo: int, hi: int) -> list[int]:
    """Split `total` into `slots` integers in [lo, hi], front-loaded."""
    if slots == 0:
        if total != 0:
            raise PlanRealizationError("nonzero aggregate with zero slots")
        return []
    if not slots * lo <= total <= slots * hi:
        raise PlanRealizationError(
            f"cannot split {total} into {slots} x [{lo}, {hi}]"
        )
    out = []
    rem = total
    for i in range(slots):
        left = slots - i - 1
        g = min(hi, rem - left * lo)
        out.append(g)
        rem -= g
    return out


def _chunk_appends(
    flow: Flow, ctx: ChunkContext, apad: int, pins: tuple[PinOption, ...]
) -> dict[int, int]:
    """Distribute padded bytes over the chunk's forward packets."""
    fwd = [
        j
        for j in range(ctx.start, ctx.end)
        if flow.packets[j].direction is Direction.FWD
    ]
    appends = {}
    frozen = set()
    for j, req in sorted(ctx.deficits.items()):
        appends[j] = req - flow.packets[j].length
    for pin in pins:
        j = pin.packet
        if pin.mode == "keep":
            if j in appends:
                raise PlanRealizationError("keep-pin clashes with a deficit")
            frozen.add(j)
            continue
        need = max(appends.get(j, 0), pin.value - flow.packets[j].length)
        appends[j] = need
        if pin.freeze:
            frozen.add(j)
    used = sum(appends.values())
    if used > apad:
        raise PlanRealizationError("pins demand more padding than solved")
    extra = apad - used
    budget_slots = ctx.q_pads - len(appends)
    if budget_slots < 0:
        raise PlanRealizationError("more pinned pads than the packet quota")
    # grow already-padded unfrozen packets first, then open new ones
    order = sorted(
        (j for j in fwd if j not in frozen),
        key=lambda j: (j not in appends, -(ctx.cap_len - flow.packets[j].length), j),
    )
    for j in order:
        if extra == 0:
            break
        opened = j not in appends
        if opened and budget_slots <= 0:
            continue
        headroom = ctx.cap_len - flow.packets[j].length - appends.get(j, 0)
        if headroom <= 0:
            continue
        take = min(headroom, extra)
        appends[j] = appends.get(j, 0) + take
        extra -= take
        if opened:
            budget_slots -= 1
    if extra:
        raise PlanRealizationError("padding overflowed every eligible packet")
    return {j: a for j, a in appends.items() if a > 0}


def _chunk_plan_variants(flow: Flow, ctx: ChunkContext, model: dict[str, int]):
    delays = {
        j: model.get(var, 0)
        for j, var in ctx.delay_vars.items()
        if model.get(var, 0) > 0
    }
    k = model.get("ik", 0)
    injection = None
    if k > 0:
        gaps = [model["it1"]] + waterfill(
            model["itr"], k - 1, ctx.gap_lo, ctx.gap_hi
        )
        lengths = waterfill(model["il"], k, ctx.len_lo, ctx.len_hi)
        injection = Injection(ctx.end - 1, tuple(gaps), tuple(lengths))
    apad = model.get("apad", 0)
    pin_sets = [()]
    for r in (1, 2):
        for combo in itertools.combinations(ctx.pin_options, r):
            if len({p.packet for p in combo}) == len(combo):
                pin_sets.append(combo)
    for pins in pin_sets:
        try:
            appends = _chunk_appends(flow, ctx, apad, pins)
        except PlanRealizationError:
            continue
        yield delays, appends, injection


def chunk_feature_value(
    flow: Flow,
    ctx: ChunkContext,
    fs,
    delays: dict[int, int],
    appends: dict[int, int],
    injection: Injection | None,
) -> Fraction:
    """Chunk-local feature value after applying the edits, exact."""
    times = flow.times_us()
    packets = flow.packets

    def scoped(scope: Scope) -> list[int]:
        if scope is Scope.BI:
            return list(range(ctx.start, ctx.end))
        want = Direction.FWD if scope is Scope.FWD else Direction.BWD
        return [j for j in range(ctx.start, ctx.end)
                if packets[j].direction is want]

    def gap_list(scope: Scope) -> list[int]:
        gaps = []
        if scope is Scope.BI:
            for j in range(max(ctx.start, 1), ctx.end):
                gaps.append(times[j] - times[j - 1] + delays.get(j, 0))
        else:
            idx = scoped(scope)
            for p, q in zip(idx, idx[1:]):
                d = sum(delays.get(j, 0) for j in range(p + 1, q + 1))
                gaps.append(times[q] - times[p] + d)
        if injection is not None and scope is not Scope.BWD:
            inj = list(injection.gaps_us)
            if scope is Scope.BI:
                gaps.extend(inj)
            else:
                idx = scoped(scope)
                if idx:
                    c0 = times[ctx.end - 1] - times[idx[-1]]
                    gaps.append(inj[0] + c0)
                    gaps.extend(inj[1:])
                else:
                    gaps.extend(inj[1:])
        return gaps

    def length_list(scope: Scope) -> list[int]:
        idx = scoped(scope)
        out = [packets[j].length + appends.get(j, 0) for j in idx]
        if injection is not None and scope is not Scope.BWD:
            out.extend(injection.lengths)
        return out

    def stat(kind: Kind, values: list[int]) -> Fraction:
        if not values:
            return Fraction(0)
        if kind is Kind.SUM:
            return Fraction(sum(values))
        if kind is Kind.MIN:
            return Fraction(min(values))
        if kind is Kind.MAX:
            return Fraction(max(values))
        if kind is Kind.MEAN:
            return Fraction(sum(values), len(values))
        raise ValueError(f"{kind} is not checked per chunk")

    if fs.field is Field.IAT:
        value = stat(fs.kind, gap_list(fs.scope))
        return value / US
    if fs.field is Field.LENGTH:
        return stat(fs.kind, length_list(fs.scope))
    if fs.field is Field.BYTES or fs.field is Field.PACKETS:
        n = len(length_list(fs.scope))
        total = sum(length_list(fs.scope))
        dur = Fraction(sum(gap_list(Scope.BI)), US)
        if fs.kind is Kind.COUNT:
            return Fraction(n)
        if fs.kind is Kind.SUM:
            return Fraction(total)
        if fs.kind is Kind.RATE:
            if dur == 0:
                raise PlanRealizationError("zero chunk duration")
            return (Fraction(n) if fs.field is Field.PACKETS else Fraction(total)) / dur
    raise ValueError(f"cannot evaluate feature {fs.name!r} per chunk")


def _verify_chunk(flow, ctx, prof_map, delays, appends, injection) -> bool:
    for band in ctx.targets:
        fs = prof_map[band.name]
        if fs.solver_class is SolverClass.RECOMPUTE_ONLY:
            continue
        value = chunk_feature_value(flow, ctx, fs, delays, appends, injection)
        if not band.lo <= value <= band.hi:
            return False
    return True


def build_plan(
    flow: Flow,
    prof: Profile,
    queries: list[SmtQuery],
    models: list[dict[str, int]],
) -> PerturbationPlan:
    """Distribute per-chunk models into one concrete plan, exactly verified."""
    prof_map = {fs.name: fs for fs in prof}
    delays_all: dict[int, int] = {}
    appends_all: dict[int, int] = {}
    injections: list[Injection] = []
    for query, model in zip(queries, models):
        ctx = query.chunk
        chosen = None
        for delays, appends, injection in _chunk_plan_variants(flow, ctx, model):
            if _verify_chunk(flow, ctx, prof_map, delays, appends, injection):
                chosen = (delays, appends, injection)
                break
        if chosen is None:
            raise PlanRealizationError(
                f"no distribution of the chunk {ctx.index} model verifies"
            )
        delays, appends, injection = chosen
        delays_all.update(delays)
        appends_all.update(appends)
        if injection is not None:
            injections.append(injection)
    return PerturbationPlan(
        flow_id=flow.id,
        delays_us=delays_all,
        appends=appends_all,
        injections=tuple(injections),
    )


def reconstruct(flow: Flow, plan: PerturbationPlan) -> Flow:
    """Apply a plan: delayed gaps, padded lengths, injected bursts."""
    if plan.flow_id != flow.id:
        raise ValueError(f"plan is for {plan.flow_id!r}, not {flow.id!r}")
    burst_after = {inj.after: inj for inj in plan.injections}
    packets: list[Packet] = []
    for j, p in enumerate(flow.packets):
        iat = p.iat_us + plan.delays_us.get(j, 0)
        length = p.length + plan.appends.get(j, 0)
        packets.append(Packet(iat, length, p.direction))
        inj = burst_after.get(j)
        if inj is not None:
            for gap, plen in zip(inj.gaps_us, inj.lengths):
                packets.append(Packet(gap, plen, Direction.FWD))
    return Flow(flow.id, flow.label, tuple(packets))


@dataclass
class ValidationReport:
    ok: bool
    errors: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


_MATCH_NODE_CAP = 500_000


def _injectable(pp, tm: ThreatModel) -> bool:
    return (
        pp.direction is tm.attacker_direction
        and tm.min_inject_length <= pp.length <= tm.mtu
        and pp.iat_us >= tm.min_iat_us
    )


def validate(original: Flow, perturbed: Flow, tm: ThreatModel) -> ValidationReport:
    """Check that `perturbed` is reachable from `original` under `tm`.

    Works from the two packet sequences alone.  Every original packet
    must reappear in order; surplus packets must look like attacker
    injections; the recovered delay shifts must be nonnegative,
    nondecreasing, change only at attacker-direction packets, and fit
    the budget; padding stays under its count and size caps.

    An injected packet can imitate a delayed original, so the alignment
    is found by a backtracking search over the original-or-injected
    classification rather than a single greedy pass.  Backward packets
    cannot be injected, which anchors the search and keeps it cheap.
    """
    t_orig = original.times_us()
    t_pert = perturbed.times_us()
    n = len(original.packets)
    m = len(perturbed.packets)
    strict_len = tm.kind is ThreatKind.IN_PATH
    budget = tm.budget_frac * original.duration_us
    pad_cap = (tm.pad_frac * n).__floor__()

    errors: list[str] = []
    if m > tm.max_packets:
        errors.append(f"perturbed flow has {m} packets (cap {tm.max_packets})")
    if m < n:
        errors.append("perturbed flow dropped packets")
    if m > n and not tm.can_inject:
        errors.append("extra packets under a model that cannot inject")
    if m - n > tm.max_inject:
        errors.append(f"{m - n} extra packets exceed the cap of {tm.max_inject}")
    if errors:
        return ValidationReport(False, errors)

    # frames: (i, j, inserted_us, n_inj, n_pad, s_prev, stage)
    # stage 0 tries the match, stage 1 classifies packet j as injected
    stack = [(0, 0, 0, 0, 0, 0, 0)]
    nodes = 0
    while stack:
        i, j, inserted, n_inj, n_pad, s_prev, stage = stack.pop()
        nodes += 1
        if nodes > _MATCH_NODE_CAP:
            return ValidationReport(False, ["alignment search exceeded its budget"])
        if i == n:
            if n_inj + (m - j) > tm.max_inject:
                continue
            if all(_injectable(perturbed.packets[q], tm) for q in range(j, m)):
                return ValidationReport(True, [])
            continue
        if (m - j) < (n - i):
            continue
        if (m - j) - (n - i) > tm.max_inject - n_inj:
            continue
        if stage == 0:
            # come back for the injected branch after the match branch
            stack.append((i, j, inserted, n_inj, n_pad, s_prev, 1))
            op = original.packets[i]
            pp = perturbed.packets[j]
            if pp.direction is not op.direction:
                continue
            if op.direction is not tm.attacker_direction or strict_len:
                if pp.length != op.length:
                    continue
                grown = False
            else:
                if pp.length < op.length or pp.length > tm.mtu:
                    continue
                grown = pp.length > op.length
            if grown and n_pad + 1 > pad_cap:
                continue
            shift = t_pert[j] - t_orig[i] - inserted
            if shift < 0 or shift > budget:
                continue
            if op.direction is tm.attacker_direction:
                if shift < s_prev:
                    continue
            elif shift != s_prev:
                continue
            stack.append((i + 1, j + 1, inserted, n_inj, n_pad + grown, shift, 0))
        else:
            pp = perturbed.packets[j]
            if not tm.can_inject or n_inj + 1 > tm.max_inject:
                continue
            if not _injectable(pp, tm):
                continue
            stack.append((i, j + 1, inserted + pp.iat_us, n_inj + 1, n_pad, s_prev, 0))

    return ValidationReport(False, _diagnose(original, perturbed, tm))


def _diagnose(original: Flow, perturbed: Flow, tm: ThreatModel) -> list[str]:
    """Best-effort explanation after the alignment search failed.

    Replays a single greedy earliest-feasible alignment and reports what
    breaks along it.  The greedy path is not always the right one, so the
    messages are indicative rather than exact.
    """
    errors: list[str] = []
    t_orig = original.times_us()
    t_pert = perturbed.times_us()
    strict_len = tm.kind is ThreatKind.IN_PATH

    match: list[int] = []
    injected: list[int] = []
    ptr = 0
    for i, op in enumerate(original.packets):
        found = None
        while ptr < len(perturbed.packets):
            pp = perturbed.packets[ptr]
            ok = pp.direction is op.direction and t_pert[ptr] >= t_orig[i]
            if ok:
                if op.direction is not tm.attacker_direction or strict_len:
                    ok = pp.length == op.length
                else:
                    ok = pp.length >= op.length
            if ok:
                found = ptr
                ptr += 1
                break
            injected.append(ptr)
            ptr += 1
        if found is None:
            errors.append(f"original packet {i} has no counterpart")
            return errors
        match.append(found)
    injected.extend(range(ptr, len(perturbed.packets)))

    for j in injected:
        pp = perturbed.packets[j]
        if pp.direction is not tm.attacker_direction:
            errors.append(f"injected packet {j} travels the wrong way")
        if not tm.min_inject_length <= pp.length <= tm.mtu:
            errors.append(f"injected packet {j} length {pp.length} out of bounds")
        if pp.iat_us < tm.min_iat_us:
            errors.append(f"injected packet {j} has a non-positive gap")

    inj_set = set(injected)
    inserted_before = []
    acc = 0
    for j in range(len(perturbed.packets)):
        if j in inj_set:
            acc += perturbed.packets[j].iat_us
        inserted_before.append(acc)
    prev_shift = None
    for i, j in enumerate(match):
        shift = t_pert[j] - t_orig[i] - inserted_before[j]
        if shift < 0:
            errors.append(f"original packet {i} moved earlier in time")
        if prev_shift is not None:
            if shift < prev_shift:
                errors.append(f"delay shrinks at packet {i}")
            if (original.packets[i].direction is not tm.attacker_direction
                    and shift != prev_shift):
                errors.append(
                    f"delay changes at packet {i}, which the attacker "
                    "does not control"
                )
        prev_shift = shift
    if prev_shift is not None and prev_shift > tm.budget_frac * original.duration_us:
        errors.append(
            f"total delay {prev_shift}us exceeds the budget "
            f"({tm.delay_budget_frac:.0%} of {original.duration_us}us)"
        )

    padded = [
        i for i, j in enumerate(match)
        if perturbed.packets[j].length > original.packets[i].length
    ]
    pad_cap = (tm.pad_frac * len(original.packets)).__floor__()
    if len(padded) > pad_cap:
        errors.append(f"{len(padded)} padded packets exceed the cap of {pad_cap}")
    for i in padded:
        if perturbed.packets[match[i]].length > tm.mtu:
            errors.append(f"padded packet {i} exceeds the mtu")
    if not errors:
        errors.append(
            "no threat-model-consistent alignment of originals into the "
            "perturbed sequence"
        )
    return errors


def bands_satisfied(
    perturbed: Flow, targets: list[TargetBand], prof: Profile
) -> dict[str, bool]:
    """Exact rational band check on a reconstructed flow (single chunk)."""
    from ..features import extract_exact

    exact = extract_exact(perturbed, prof)
    prof_map = {fs.name: fs for fs in prof}
    out = {}
    for band in targets:
        fs = prof_map[band.name]
        if fs.solver_class is SolverClass.RECOMPUTE_ONLY:
            continue
        out[band.name] = band.lo <= exact[band.name] <= band.hi
    return out
