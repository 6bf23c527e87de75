"""Encode feature bands + an attacker envelope into solver queries.

All solver variables are integers: microseconds for time, bytes for
length.  Feature targets arrive as exact fractions and every comparison
is cleared to integer coefficients, so a model that satisfies the query
satisfies the bands exactly in rational arithmetic.

Per-packet variables are kept only for delays (gaps are positional).
Injected packets and payload padding are interchangeable, so they are
encoded as aggregates - injected count ``ik``, a nonzero flag ``iz``,
bridge gap ``it1``, interior gap total ``itr``, injected byte total
``il``, padded byte total ``apad`` - and a deterministic waterfill
distributes them back onto concrete packets after solving.  A feasible
per-item split of an aggregate S over m items bounded to [lo, hi]
exists iff m*lo <= S <= m*hi, which is what the emitted rows pin down.

With chunking, each chunk becomes an independent query over chunk-local
gap lists: the bidirectional list owns the chunk's leading boundary gap
(so durations stay additive), directional lists only pair packets inside
the chunk, and injected packets sit at the chunk end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from ..features import (
    ChunkType,
    Field,
    FeatureSpec,
    Kind,
    Profile,
    Scope,
    SolverClass,
)
from ..flows import Direction, Flow, US
from ..threat import ThreatModel

MT_CAP_US = 10**10  # hard ceiling for any single injected gap


@dataclass(frozen=True)
class TargetBand:
    """One constrained feature: value +/- half_width in raw feature units."""

    name: str
    value: Fraction
    half_width: Fraction = Fraction(0)

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError("half_width must be >= 0")

    @property
    def lo(self) -> Fraction:
        return self.value - self.half_width

    @property
    def hi(self) -> Fraction:
        return self.value + self.half_width


@dataclass
class PinOption:
    """A post-hoc distribution constraint tied to one attainment branch."""

    mode: str  # "pad_to" or "keep"
    packet: int
    value: int = 0
    freeze: bool = False  # frozen pins take no padding beyond `value`


@dataclass
class ChunkContext:
    """Everything the model-to-plan conversion needs for one chunk."""

    index: int
    start: int
    end: int
    delay_vars: dict[int, str] = field(default_factory=dict)
    has_append: bool = False
    q_pads: int = 0
    cap_len: int = 0
    deficits: dict[int, int] = field(default_factory=dict)
    has_inject: bool = False
    inject_cap: int = 0
    gap_lo: int = 1
    gap_hi: int = MT_CAP_US
    len_lo: int = 40
    len_hi: int = 1500
    pin_options: list[PinOption] = field(default_factory=list)
    targets: list[TargetBand] = field(default_factory=list)


@dataclass
class SmtQuery:
    text: str
    chunk: ChunkContext

    @property
    def n_assertions(self) -> int:
        return self.text.count("(assert ")

    @property
    def n_vars(self) -> int:
        return self.text.count("(declare-const ")


class _Lin:
    """Integer-coefficient linear expression over declared variables."""

    __slots__ = ("coeffs", "const")

    def __init__(self, coeffs=None, const=0):
        self.coeffs = dict(coeffs or {})
        self.const = const

    def copy(self):
        return _Lin(self.coeffs, self.const)

    def add(self, other, scale=1):
        for v, a in other.coeffs.items():
            self.coeffs[v] = self.coeffs.get(v, 0) + scale * a
            if self.coeffs[v] == 0:
                del self.coeffs[v]
        self.const += scale * other.const
        return self

    def add_var(self, name, coeff=1):
        self.coeffs[name] = self.coeffs.get(name, 0) + coeff
        if self.coeffs[name] == 0:
            del self.coeffs[name]
        return self

    def scaled(self, k):
        out = _Lin()
        out.coeffs = {v: k * a for v, a in self.coeffs.items()}
        out.const = k * self.const
        return out

    def is_const(self):
        return not self.coeffs

    def sexpr(self):
        parts = []
        for v, a in self.coeffs.items():
            if a == 1:
                parts.append(v)
            else:
                parts.append(f"(* {_num(a)} {v})")
        if self.const != 0 or not parts:
            parts.append(_num(self.const))
        if len(parts) == 1:
            return parts[0]
        return "(+ " + " ".join(parts) + ")"


def _num(k: int) -> str:
    return str(k) if k >= 0 else f"(- {-k})"


def _ceil_frac(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def _floor_frac(x: Fraction) -> int:
    return x.numerator // x.denominator


class _Emitter:
    def __init__(self):
        self.decls: list[str] = []
        self.asserts: list[str] = []

    def declare(self, name: str) -> str:
        self.decls.append(name)
        return name

    def raw(self, sexpr: str) -> None:
        self.asserts.append(sexpr)

    def false(self) -> None:
        self.asserts.append("false")

    def le(self, lin: _Lin, bound: Fraction | int) -> None:
        """Assert lin <= bound, clearing any denominator exactly."""
        bound = Fraction(bound)
        scaled = lin.scaled(bound.denominator)
        self.asserts.append(f"(<= {scaled.sexpr()} {_num(bound.numerator)})")

    def ge(self, lin: _Lin, bound: Fraction | int) -> None:
        bound = Fraction(bound)
        scaled = lin.scaled(bound.denominator)
        self.asserts.append(f"(>= {scaled.sexpr()} {_num(bound.numerator)})")

    def eq(self, lin: _Lin, bound: Fraction | int) -> None:
        bound = Fraction(bound)
        if bound.denominator == 1:
            self.asserts.append(f"(= {lin.sexpr()} {_num(bound.numerator)})")
        else:
            scaled = lin.scaled(bound.denominator)
            self.asserts.append(f"(= {scaled.sexpr()} {_num(bound.numerator)})")

    def le_expr(self, lhs: _Lin, rhs: _Lin, rhs_scale: Fraction) -> None:
        """Assert lhs <= rhs_scale * rhs with exact clearing."""
        rhs_scale = Fraction(rhs_scale)
        combined = lhs.scaled(rhs_scale.denominator)
        combined.add(rhs, -rhs_scale.numerator)
        self.asserts.append(f"(<= {combined.sexpr()} 0)")

    def ge_expr(self, lhs: _Lin, rhs: _Lin, rhs_scale: Fraction) -> None:
        rhs_scale = Fraction(rhs_scale)
        combined = lhs.scaled(rhs_scale.denominator)
        combined.add(rhs, -rhs_scale.numerator)
        self.asserts.append(f"(>= {combined.sexpr()} 0)")

    @staticmethod
    def cmp_str(op: str, lin: _Lin, bound: Fraction | int) -> str:
        bound = Fraction(bound)
        scaled = lin.scaled(bound.denominator)
        return f"({op} {scaled.sexpr()} {_num(bound.numerator)})"

    def disjunction(self, branches: list[str]) -> None:
        branches = [b for b in branches if b != "false"]
        if not branches:
            self.false()
        elif any(b == "true" for b in branches):
            return
        elif len(branches) == 1:
            self.asserts.append(branches[0])
        else:
            self.asserts.append("(or " + " ".join(branches) + ")")

    def render(self) -> str:
        out = ["(set-logic QF_LIA)"]
        for name in self.decls:
            out.append(f"(declare-const {name} Int)")
        for a in self.asserts:
            out.append(f"(assert {a})")
        out.append("(check-sat)")
        out.append("(get-model)")
        return "\n".join(out) + "\n"


def chunk_ranges(n_packets: int, n_chunks: int) -> list[tuple[int, int]]:
    """Even packet split; the last chunk absorbs the remainder."""
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    base = n_packets // n_chunks
    if base < 2:
        raise ValueError(
            f"cannot cut {n_packets} packets into {n_chunks} chunks of >= 2"
        )
    ranges = []
    start = 0
    for c in range(n_chunks):
        size = base if c < n_chunks - 1 else n_packets - base * (n_chunks - 1)
        ranges.append((start, start + size))
        start += size
    return ranges


def split_inject_caps(total: int, n_chunks: int) -> list[int]:
    """Floor split of the injection budget; remainder goes to the last chunk."""
    base = total // n_chunks
    caps = [base] * n_chunks
    caps[-1] += total - base * n_chunks
    return caps


def scale_target(band: TargetBand, fs: FeatureSpec, n_chunks: int) -> TargetBand | None:
    """Per-chunk version of a target band; None when the feature is skipped."""
    if n_chunks == 1:
        return band
    if fs.chunk_type is ChunkType.IGNORED:
        return None
    if fs.chunk_type is ChunkType.ADDITIVE:
        c = Fraction(n_chunks)
        return TargetBand(band.name, band.value / c, band.half_width / c)
    return band


class _ChunkEncoder:
    def __init__(self, flow: Flow, start: int, end: int, index: int,
                 tm: ThreatModel, inject_cap: int, targets: list[TargetBand],
                 profile_map: dict[str, FeatureSpec]):
        self.flow = flow
        self.start = start
        self.end = end
        self.tm = tm
        self.targets = targets
        self.profile_map = profile_map
        self.em = _Emitter()
        self.ctx = ChunkContext(index=index, start=start, end=end,
                                inject_cap=inject_cap)
        self.times = flow.times_us()
        self.packets = flow.packets
        self._setup_capabilities()

    # ---- capability variables -------------------------------------------

    def _needs_append(self) -> bool:
        for band in self.targets:
            fs = self.profile_map[band.name]
            if fs.field in (Field.LENGTH, Field.BYTES) and fs.scope is not Scope.BWD:
                return True
        return False

    def _needs_inject(self) -> bool:
        for band in self.targets:
            fs = self.profile_map[band.name]
            if fs.scope is Scope.BWD:
                continue
            if fs.field in (Field.IAT, Field.LENGTH, Field.PACKETS, Field.BYTES):
                return True
        return False

    def _setup_capabilities(self):
        tm, em, ctx = self.tm, self.em, self.ctx
        # delays: one per forward packet whose gap belongs to this chunk
        first_gap = max(self.start, 1)
        for j in range(first_gap, self.end):
            if self.packets[j].direction is tm.attacker_direction:
                ctx.delay_vars[j] = em.declare(f"d{j}")
        chunk_dur = self._chunk_duration_const()
        self.budget = tm.budget_frac * chunk_dur
        total_delay = _Lin()
        for name in ctx.delay_vars.values():
            total_delay.add_var(name)
            em.ge(_Lin({name: 1}), 0)
        if ctx.delay_vars:
            em.le(total_delay, self.budget)
        # padding
        self.fwd_in_chunk = [
            j for j in range(self.start, self.end)
            if self.packets[j].direction is tm.attacker_direction
        ]
        ctx.q_pads = _floor_frac(tm.pad_frac * (self.end - self.start))
        ctx.cap_len = tm.mtu
        ctx.has_append = (tm.can_pad and ctx.q_pads > 0
                          and bool(self.fwd_in_chunk) and self._needs_append())
        if ctx.has_append:
            em.declare("apad")
            em.ge(_Lin({"apad": 1}), 0)
        # injection
        ctx.has_inject = (tm.can_inject and ctx.inject_cap > 0
                          and self._needs_inject())
        ctx.len_lo = tm.min_inject_length
        ctx.len_hi = tm.mtu
        ctx.gap_lo = tm.min_iat_us
        ctx.gap_hi = self._big_m()
        if ctx.has_inject:
            for name in ("ik", "iz", "it1", "itr", "il"):
                em.declare(name)
                em.ge(_Lin({name: 1}), 0)
            em.le(_Lin({"ik": 1}), ctx.inject_cap)
            em.le(_Lin({"iz": 1}), 1)
            em.ge(_Lin({"ik": 1, "iz": -1}), 0)
            em.le(_Lin({"ik": 1, "iz": -ctx.inject_cap}), 0)
        self._precompute_bounds()

    def _precompute_bounds(self):
        """Fold every extremum band into the aggregate item bounds up front,
        so each emitted row sees the final [lo, hi] windows."""
        ctx = self.ctx
        for band in self.targets:
            fs = self.profile_map[band.name]
            if fs.kind not in (Kind.MIN, Kind.MAX):
                continue
            if fs.field is Field.IAT and self._inject_into(fs.scope):
                if fs.kind is Kind.MAX:
                    ctx.gap_hi = min(ctx.gap_hi, _floor_frac(band.hi * US))
                else:
                    ctx.gap_lo = max(ctx.gap_lo, _ceil_frac(band.lo * US))
            elif fs.field is Field.LENGTH and fs.scope is not Scope.BWD:
                if fs.kind is Kind.MAX:
                    hi_int = _floor_frac(band.hi)
                    ctx.cap_len = min(ctx.cap_len, hi_int)
                    ctx.len_hi = min(ctx.len_hi, hi_int)
                else:
                    ctx.len_lo = max(ctx.len_lo, _ceil_frac(band.lo))

    def _chunk_duration_const(self) -> int:
        lo = self.times[self.start - 1] if self.start > 0 else self.times[0]
        return self.times[self.end - 1] - lo

    def _big_m(self) -> int:
        base = 2 * self._chunk_duration_const() + _ceil_frac(self.budget) + US
        for band in self.targets:
            fs = self.profile_map[band.name]
            if fs.field is not Field.IAT:
                continue
            hi_us = band.hi * US
            if fs.kind in (Kind.SUM, Kind.MAX):
                base = max(base, _ceil_frac(hi_us) + US)
            elif fs.kind is Kind.MEAN:
                count = (self.end - self.start) + self.tm.max_inject
                base = max(base, _ceil_frac(hi_us) * count + US)
        return min(base, MT_CAP_US)

    # ---- scoped gap machinery -------------------------------------------

    def _scoped_indices(self, scope: Scope) -> list[int]:
        if scope is Scope.BI:
            return list(range(self.start, self.end))
        want = Direction.FWD if scope is Scope.FWD else Direction.BWD
        return [j for j in range(self.start, self.end)
                if self.packets[j].direction is want]

    def _gap_exprs(self, scope: Scope) -> list[_Lin]:
        """Chunk-local original gaps for a scope, as linear expressions."""
        exprs = []
        if scope is Scope.BI:
            first_gap = max(self.start, 1)
            for j in range(first_gap, self.end):
                lin = _Lin(const=self.times[j] - self.times[j - 1])
                if j in self.ctx.delay_vars:
                    lin.add_var(self.ctx.delay_vars[j])
                exprs.append(lin)
            return exprs
        idx = self._scoped_indices(scope)
        for p, q in zip(idx, idx[1:]):
            lin = _Lin(const=self.times[q] - self.times[p])
            for j in range(p + 1, q + 1):
                if j in self.ctx.delay_vars:
                    lin.add_var(self.ctx.delay_vars[j])
            exprs.append(lin)
        return exprs

    def _inject_into(self, scope: Scope) -> bool:
        return (self.ctx.has_inject and scope is not Scope.BWD)

    def _bridge_offset(self, scope: Scope) -> int | None:
        """Constant time from the scope's last packet to the chunk end.

        None means the scope has no original packet in the chunk, in which
        case injected packets form their own gap chain of length ik - iz.
        """
        idx = self._scoped_indices(scope)
        if not idx:
            return None
        return self.times[self.end - 1] - self.times[idx[-1]]

    def _gap_sum(self, scope: Scope) -> _Lin:
        total = _Lin()
        for g in self._gap_exprs(scope):
            total.add(g)
        if self._inject_into(scope):
            c0 = self._bridge_offset(scope)
            if c0 is None:
                total.add_var("itr")
            else:
                total.add_var("it1")
                total.add_var("itr")
                if c0:
                    total.add_var("iz", c0)
        return total

    def _gap_count(self, scope: Scope) -> _Lin:
        n = len(self._gap_exprs(scope))
        lin = _Lin(const=n)
        if self._inject_into(scope):
            if self._bridge_offset(scope) is None:
                lin.add_var("ik")
                lin.add_var("iz", -1)
            else:
                lin.add_var("ik")
        return lin

    def _lengths(self, scope: Scope) -> list[int]:
        return [self.packets[j].length for j in self._scoped_indices(scope)]

    def _length_sum(self, scope: Scope) -> _Lin:
        lin = _Lin(const=sum(self._lengths(scope)))
        if scope is not Scope.BWD:
            if self.ctx.has_append:
                lin.add_var("apad")
            if self.ctx.has_inject:
                lin.add_var("il")
        return lin

    def _packet_count(self, scope: Scope) -> _Lin:
        lin = _Lin(const=len(self._scoped_indices(scope)))
        if self._inject_into(scope):
            lin.add_var("ik")
        return lin

    def _duration(self) -> _Lin:
        """Chunk-local duration: all owned gaps plus injected extension."""
        return self._gap_sum(Scope.BI)

    # ---- feature row emission -------------------------------------------

    def encode_target(self, band: TargetBand) -> None:
        fs = self.profile_map[band.name]
        if fs.solver_class is SolverClass.RECOMPUTE_ONLY:
            return
        if fs.kind in (Kind.MIN, Kind.MAX):
            if fs.field is Field.IAT:
                self._extremum_iat(band, fs)
            else:
                self._extremum_length(band, fs)
            return
        em = self.em
        if fs.field is Field.IAT:
            total = self._gap_sum(fs.scope)
            if fs.kind is Kind.SUM:
                em.ge(total, band.lo * US)
                em.le(total, band.hi * US)
            else:  # MEAN
                count = self._gap_count(fs.scope)
                em.ge_expr(total, count, band.lo * US)
                em.le_expr(total, count, band.hi * US)
        elif fs.field is Field.LENGTH:
            total = self._length_sum(fs.scope)
            if fs.kind is Kind.SUM:
                em.ge(total, band.lo)
                em.le(total, band.hi)
            else:  # MEAN
                count = self._packet_count(fs.scope)
                em.ge_expr(total, count, band.lo)
                em.le_expr(total, count, band.hi)
        elif fs.field is Field.BYTES and fs.kind is Kind.SUM:
            total = self._length_sum(fs.scope)
            em.ge(total, band.lo)
            em.le(total, band.hi)
        elif fs.field is Field.PACKETS and fs.kind is Kind.COUNT:
            count = self._packet_count(fs.scope)
            em.ge(count, band.lo)
            em.le(count, band.hi)
        elif fs.kind is Kind.RATE:
            # value per second: lo * dur_us <= 1e6 * numerator <= hi * dur_us
            dur = self._duration()
            if fs.field is Field.PACKETS:
                numer = self._packet_count(fs.scope)
            else:
                numer = self._length_sum(fs.scope)
            em.ge_expr(numer.scaled(US), dur, band.lo)
            em.le_expr(numer.scaled(US), dur, band.hi)
        else:
            raise ValueError(f"cannot encode feature {fs.name!r}")

    def _extremum_iat(self, band: TargetBand, fs: FeatureSpec) -> None:
        em, ctx = self.em, self.ctx
        gaps = self._gap_exprs(fs.scope)
        injected = self._inject_into(fs.scope)
        c0 = self._bridge_offset(fs.scope) if injected else None
        lo_us, hi_us = band.lo * US, band.hi * US
        if fs.kind is Kind.MAX:
            # every gap <= hi, some gap >= lo
            for g in gaps:
                em.le(g, hi_us)
            if injected and c0 is not None:
                bridge = _Lin({"it1": 1, "iz": c0}) if c0 else _Lin({"it1": 1})
                em.le(bridge, hi_us)
            branches = [em.cmp_str(">=", g, lo_us) for g in gaps]
            if injected:
                a_int = max(_ceil_frac(lo_us), ctx.gap_lo)
                if c0 is not None and Fraction(c0) <= hi_us:
                    bridge = _Lin({"it1": 1, "iz": c0}) if c0 else _Lin({"it1": 1})
                    branches.append(
                        "(and (= iz 1) " + em.cmp_str(">=", bridge, lo_us) + ")"
                    )
                if a_int <= ctx.gap_hi:
                    need = _Lin({"itr": 1, "ik": -ctx.gap_lo, "iz": ctx.gap_lo})
                    branches.append(
                        "(and (>= (- ik iz) 1) "
                        + em.cmp_str(">=", need, a_int - ctx.gap_lo)
                        + ")"
                    )
            em.disjunction(branches)
        else:  # MIN: every gap >= lo, some gap <= hi
            for g in gaps:
                em.ge(g, lo_us)
            if injected and c0 is not None:
                # bridge >= lo only when a bridge exists (iz = 1)
                lo_int = _ceil_frac(lo_us)
                em.ge(_Lin({"it1": 1, "iz": c0 - lo_int}), 0)
            branches = [em.cmp_str("<=", g, hi_us) for g in gaps]
            if injected:
                b_int = min(_floor_frac(hi_us), ctx.gap_hi)
                if c0 is not None and Fraction(c0) <= hi_us:
                    bridge = _Lin({"it1": 1, "iz": c0}) if c0 else _Lin({"it1": 1})
                    branches.append(
                        "(and (= iz 1) " + em.cmp_str("<=", bridge, hi_us) + ")"
                    )
                if b_int >= ctx.gap_lo:
                    spare = _Lin({"itr": 1, "ik": -ctx.gap_hi, "iz": ctx.gap_hi})
                    branches.append(
                        "(and (>= (- ik iz) 1) "
                        + em.cmp_str("<=", spare, b_int - ctx.gap_hi)
                        + ")"
                    )
            em.disjunction(branches)

    def _extremum_length(self, band: TargetBand, fs: FeatureSpec) -> None:
        em, ctx = self.em, self.ctx
        lengths = [(j, self.packets[j].length) for j in self._scoped_indices(fs.scope)]
        fwd_set = set(self.fwd_in_chunk)
        paddable = ctx.has_append
        injected = self._inject_into(fs.scope)
        lo_int, hi_int = _ceil_frac(band.lo), _floor_frac(band.hi)
        if fs.kind is Kind.MAX:
            # originals must not exceed hi (padding only grows them)
            for j, l in lengths:
                if l > hi_int:
                    em.false()
                    return
            branches = []
            if any(l >= lo_int for _, l in lengths):
                branches.append("true")
            if paddable:
                eligible = [(l, j) for j, l in lengths
                            if j in fwd_set and l <= hi_int]
                if eligible:
                    l_pin, j_pin = max(eligible)
                    if lo_int - l_pin <= ctx.cap_len - l_pin:
                        branches.append(
                            em.cmp_str(">=", _Lin({"apad": 1}), max(0, lo_int - l_pin))
                        )
                        ctx.pin_options.append(PinOption("pad_to", j_pin, lo_int))
            if injected and lo_int <= ctx.len_hi:
                need = _Lin({"il": 1, "ik": -ctx.len_lo})
                branches.append(
                    "(and (>= ik 1) "
                    + em.cmp_str(">=", need, lo_int - ctx.len_lo)
                    + ")"
                )
            em.disjunction(branches)
        else:  # MIN
            deficits = {}
            for j, l in lengths:
                if l < lo_int:
                    if j not in fwd_set or not paddable:
                        em.false()
                        return
                    deficits[j] = lo_int - l
            if len(deficits) > ctx.q_pads or (deficits and lo_int > ctx.cap_len):
                em.false()
                return
            if deficits:
                em.ge(_Lin({"apad": 1}), sum(deficits.values()))
                for j, need in deficits.items():
                    prev = ctx.deficits.get(j, 0)
                    ctx.deficits[j] = max(prev, need + self.packets[j].length)

            def spread_cap(pin: int | None, pin_room: int, keep: int | None) -> int:
                # Largest apad the realizer can place when `pin` is frozen at
                # a fixed length, `keep` must stay untouched, and every
                # deficit packet is a forced member of the padded set.
                room, used, rest = 0, 0, []
                for j in self.fwd_in_chunk:
                    h = max(0, ctx.cap_len - self.packets[j].length)
                    if j == pin:
                        room += pin_room
                        used += 1
                    elif j in deficits:
                        room += h
                        used += 1
                    elif j != keep:
                        rest.append(h)
                rest.sort(reverse=True)
                return room + sum(rest[: max(0, ctx.q_pads - used)])

            branches = []
            if deficits:
                # a deficit packet padded exactly to the floor lands in band;
                # apad must then fit the remaining headroom or the realizer
                # cannot honor the freeze
                j_pin = min(deficits)
                cap_a = spread_cap(j_pin, lo_int - self.packets[j_pin].length, None)
                branches.append(em.cmp_str("<=", _Lin({"apad": 1}), cap_a))
                ctx.pin_options.append(PinOption("pad_to", j_pin, lo_int, freeze=True))
            unpadded_ok = [j for j, l in lengths if lo_int <= l <= hi_int]
            if unpadded_ok:
                j_keep = max(unpadded_ok, key=lambda j: self.packets[j].length)
                if paddable:
                    cap_b = spread_cap(None, 0, j_keep)
                    branches.append(em.cmp_str("<=", _Lin({"apad": 1}), cap_b))
                else:
                    branches.append("true")
                ctx.pin_options.append(PinOption("keep", j_keep))
            if injected and hi_int >= ctx.len_lo:
                b_int = min(hi_int, ctx.len_hi)
                spare = _Lin({"il": 1, "ik": -ctx.len_hi})
                branches.append(
                    "(and (>= ik 1) "
                    + em.cmp_str("<=", spare, b_int - ctx.len_hi)
                    + ")"
                )
            em.disjunction(branches)

    # ---- finalization ----------------------------------------------------

    def finish(self) -> SmtQuery:
        em, ctx = self.em, self.ctx
        if ctx.has_inject:
            # gap aggregates must be distributable within [gap_lo, gap_hi]
            em.ge(_Lin({"it1": 1, "iz": -ctx.gap_lo}), 0)
            em.le(_Lin({"it1": 1, "iz": -ctx.gap_hi}), 0)
            em.ge(_Lin({"itr": 1, "ik": -ctx.gap_lo, "iz": ctx.gap_lo}), 0)
            em.le(_Lin({"itr": 1, "ik": -ctx.gap_hi, "iz": ctx.gap_hi}), 0)
            em.ge(_Lin({"il": 1, "ik": -ctx.len_lo}), 0)
            em.le(_Lin({"il": 1, "ik": -ctx.len_hi}), 0)
            if ctx.len_lo > ctx.len_hi:
                em.le(_Lin({"ik": 1}), 0)
        if ctx.has_append:
            # deficit packets are forced into the padded set, so only the
            # leftover slots get filled greedily by headroom
            forced, rest = 0, []
            for j in self.fwd_in_chunk:
                h = max(0, ctx.cap_len - self.packets[j].length)
                if j in ctx.deficits:
                    forced += h
                else:
                    rest.append(h)
            rest.sort(reverse=True)
            cap = forced + sum(rest[: max(0, ctx.q_pads - len(ctx.deficits))])
            em.le(_Lin({"apad": 1}), cap)
        ctx.targets = list(self.targets)
        return SmtQuery(em.render(), ctx)


def encode(
    flow: Flow,
    prof: Profile,
    targets: list[TargetBand],
    tm: ThreatModel,
    n_chunks: int = 1,
) -> list[SmtQuery]:
    """Build one query per chunk.  Recompute-only targets are dropped here;
    the caller re-checks them after reconstruction."""
    profile_map = {fs.name: fs for fs in prof}
    for band in targets:
        if band.name not in profile_map:
            raise ValueError(f"target {band.name!r} is not in the profile")
    ranges = chunk_ranges(len(flow.packets), n_chunks)
    total_inject = tm.max_inject
    if len(flow.packets) + total_inject > tm.max_packets:
        total_inject = max(0, tm.max_packets - len(flow.packets))
    caps = split_inject_caps(total_inject, n_chunks)
    queries = []
    for c, (start, end) in enumerate(ranges):
        chunk_targets = []
        for band in targets:
            fs = profile_map[band.name]
            if fs.solver_class is SolverClass.RECOMPUTE_ONLY:
                continue
            scaled = scale_target(band, fs, n_chunks)
            if scaled is not None:
                chunk_targets.append(scaled)
        enc = _ChunkEncoder(flow, start, end, c, tm, caps[c], chunk_targets,
                            profile_map)
        for band in chunk_targets:
            enc.encode_target(band)
        queries.append(enc.finish())
    return queries
