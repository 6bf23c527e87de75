"""Flow feature profiles, extraction, and min-max normalization.

Three built-in profiles mirror common traffic-analysis feature sets:

* ``vpn``  - timing-only: per-direction iat aggregates plus active/idle
  period statistics and throughput rates (22 features).
* ``app``  - per-direction iat and length statistics plus packet counts
  (22 features).
* ``qoe``  - bidirectional length/iat statistics, totals, unique length
  count and microburst count (14 features).

Every feature is tagged with how a constraint solver can handle it:
linear-equality, disjunctive extremum, or recompute-only (checked after
reconstruction instead of being encoded).
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .flows import Direction, Flow, US

ACTIVE_IDLE_THRESHOLD_US = 100_000  # 0.1 s splits active spans from idle gaps
MICROBURST_GAP_US = 1_000  # gaps <= 1 ms chain packets into a burst


class Kind(str, Enum):
    SUM = "sum"
    MIN = "min"
    MAX = "max"
    MEAN = "mean"
    MEDIAN = "median"
    STD = "std"
    COUNT = "count"
    RATE = "rate"
    UNIQUE = "unique"
    BURSTS = "bursts"


class Field(str, Enum):
    IAT = "iat"
    LENGTH = "length"
    ACTIVE = "active"
    IDLE = "idle"
    PACKETS = "packets"
    BYTES = "bytes"


class Scope(str, Enum):
    BI = "bi"
    FWD = "fwd"
    BWD = "bwd"


class SolverClass(str, Enum):
    LINEAR_EQ = "linear_eq"
    DISJUNCTIVE_EXTREMUM = "disjunctive_extremum"
    RECOMPUTE_ONLY = "recompute_only"


class ChunkType(str, Enum):
    PER_CHUNK = "per_chunk"
    ADDITIVE = "additive"
    IGNORED = "ignored"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: Kind
    field: Field
    scope: Scope = Scope.BI

    @property
    def solver_class(self) -> SolverClass:
        if self.field in (Field.ACTIVE, Field.IDLE):
            return SolverClass.RECOMPUTE_ONLY
        if self.kind in (Kind.MEDIAN, Kind.STD, Kind.UNIQUE, Kind.BURSTS):
            return SolverClass.RECOMPUTE_ONLY
        if self.kind in (Kind.MIN, Kind.MAX):
            return SolverClass.DISJUNCTIVE_EXTREMUM
        return SolverClass.LINEAR_EQ

    @property
    def chunk_type(self) -> ChunkType:
        if self.field in (Field.ACTIVE, Field.IDLE):
            return ChunkType.IGNORED
        if self.kind in (Kind.UNIQUE, Kind.BURSTS):
            return ChunkType.IGNORED
        if self.kind in (Kind.SUM, Kind.COUNT):
            return ChunkType.ADDITIVE
        return ChunkType.PER_CHUNK


Profile = tuple[FeatureSpec, ...]


def _vpn_profile() -> Profile:
    specs = []
    for scope in (Scope.BI, Scope.FWD, Scope.BWD):
        for kind in (Kind.SUM, Kind.MIN, Kind.MAX, Kind.MEAN):
            specs.append(
                FeatureSpec(f"{scope.value}_iat_{kind.value}", kind, Field.IAT, scope)
            )
    for field in (Field.ACTIVE, Field.IDLE):
        for kind in (Kind.MIN, Kind.MAX, Kind.MEAN, Kind.STD):
            specs.append(FeatureSpec(f"{field.value}_{kind.value}", kind, field))
    specs.append(FeatureSpec("packets_per_s", Kind.RATE, Field.PACKETS))
    specs.append(FeatureSpec("bytes_per_s", Kind.RATE, Field.BYTES))
    return tuple(specs)


def _app_profile() -> Profile:
    specs = []
    stat_kinds = (Kind.SUM, Kind.MIN, Kind.MAX, Kind.MEAN, Kind.STD)
    for scope in (Scope.FWD, Scope.BWD):
        for kind in stat_kinds:
            specs.append(
                FeatureSpec(f"{scope.value}_iat_{kind.value}", kind, Field.IAT, scope)
            )
    for scope in (Scope.FWD, Scope.BWD):
        for kind in stat_kinds:
            specs.append(
                FeatureSpec(f"{scope.value}_len_{kind.value}", kind, Field.LENGTH, scope)
            )
    specs.append(FeatureSpec("fwd_pkt_count", Kind.COUNT, Field.PACKETS, Scope.FWD))
    specs.append(FeatureSpec("bwd_pkt_count", Kind.COUNT, Field.PACKETS, Scope.BWD))
    return tuple(specs)


def _qoe_profile() -> Profile:
    specs = []
    stat_kinds = (Kind.MIN, Kind.MAX, Kind.MEAN, Kind.MEDIAN, Kind.STD)
    for kind in stat_kinds:
        specs.append(FeatureSpec(f"len_{kind.value}", kind, Field.LENGTH))
    for kind in stat_kinds:
        specs.append(FeatureSpec(f"iat_{kind.value}", kind, Field.IAT))
    specs.append(FeatureSpec("total_bytes", Kind.SUM, Field.LENGTH))
    specs.append(FeatureSpec("total_packets", Kind.COUNT, Field.PACKETS))
    specs.append(FeatureSpec("unique_lengths", Kind.UNIQUE, Field.LENGTH))
    specs.append(FeatureSpec("microbursts", Kind.BURSTS, Field.IAT))
    return tuple(specs)


_PROFILES: dict[str, Profile] = {
    "vpn": _vpn_profile(),
    "app": _app_profile(),
    "qoe": _qoe_profile(),
}


def profile(name: str) -> Profile:
    try:
        return _PROFILES[name]
    except KeyError:
        raise ValueError(
            f"unknown profile {name!r}; available: {sorted(_PROFILES)}"
        ) from None


def profile_names() -> list[str]:
    return sorted(_PROFILES)


def load_profile(path: str | Path) -> Profile:
    """Read a custom profile from a JSON list of {name, kind, field, scope}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise ValueError(f"{path}: profile must be a non-empty JSON list")
    specs = []
    seen = set()
    for i, entry in enumerate(raw):
        try:
            fs = FeatureSpec(
                entry["name"],
                Kind(entry["kind"]),
                Field(entry["field"]),
                Scope(entry.get("scope", "bi")),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}: entry {i}: {exc}") from exc
        if fs.name in seen:
            raise ValueError(f"{path}: duplicate feature name {fs.name!r}")
        seen.add(fs.name)
        specs.append(fs)
    return tuple(specs)


def _scoped_times_us(flow: Flow, scope: Scope) -> list[int]:
    times = flow.times_us()
    if scope is Scope.BI:
        return times
    want = Direction.FWD if scope is Scope.FWD else Direction.BWD
    return [t for t, p in zip(times, flow.packets) if p.direction is want]


def _scoped_gaps_us(flow: Flow, scope: Scope) -> list[int]:
    times = _scoped_times_us(flow, scope)
    return [b - a for a, b in zip(times, times[1:])]


def _scoped_lengths(flow: Flow, scope: Scope) -> list[int]:
    if scope is Scope.BI:
        return [p.length for p in flow.packets]
    want = Direction.FWD if scope is Scope.FWD else Direction.BWD
    return [p.length for p in flow.packets if p.direction is want]


def active_idle_periods_us(flow: Flow) -> tuple[list[int], list[int]]:
    """Split the flow into active spans and idle gaps at the 0.1 s threshold.

    Returns (active_durations_us, idle_durations_us).  An active span is a
    maximal run of packets whose internal gaps are all <= the threshold; its
    duration is last-minus-first arrival (0 for a lone packet).  Idle
    durations are the gaps above the threshold themselves.
    """
    times = flow.times_us()
    active, idle = [], []
    span_start = times[0]
    prev = times[0]
    for t in times[1:]:
        gap = t - prev
        if gap > ACTIVE_IDLE_THRESHOLD_US:
            active.append(prev - span_start)
            idle.append(gap)
            span_start = t
        prev = t
    active.append(prev - span_start)
    return active, idle


def microburst_count(flow: Flow, gap_us: int = MICROBURST_GAP_US) -> int:
    """Number of maximal runs of consecutive gaps <= `gap_us`.

    Each run chains at least two packets into one burst, e.g. iats
    [0, 0.0005, 0.0005, 0.2, 0.0005] contain two bursts: packets 1-3 and 4-5.
    """
    gaps = _scoped_gaps_us(flow, Scope.BI)
    count = 0
    in_run = False
    for g in gaps:
        if g <= gap_us:
            if not in_run:
                count += 1
                in_run = True
        else:
            in_run = False
    return count


def _stat(kind: Kind, values: list[float]) -> float:
    if not values:
        return 0.0
    if kind is Kind.SUM:
        return float(sum(values))
    if kind is Kind.MIN:
        return float(min(values))
    if kind is Kind.MAX:
        return float(max(values))
    if kind is Kind.MEAN:
        return sum(values) / len(values)
    if kind is Kind.MEDIAN:
        return float(statistics.median(values))
    if kind is Kind.STD:
        mean = sum(values) / len(values)
        return (sum((v - mean) ** 2 for v in values) / len(values)) ** 0.5
    raise ValueError(f"{kind} is not a series statistic")


def _feature_value(flow: Flow, fs: FeatureSpec) -> float:
    if fs.field is Field.IAT and fs.kind is not Kind.BURSTS:
        gaps = [g / US for g in _scoped_gaps_us(flow, fs.scope)]
        return _stat(fs.kind, gaps)
    if fs.field is Field.LENGTH:
        lengths = _scoped_lengths(flow, fs.scope)
        if fs.kind is Kind.UNIQUE:
            return float(len(set(lengths)))
        return _stat(fs.kind, [float(v) for v in lengths])
    if fs.field in (Field.ACTIVE, Field.IDLE):
        active, idle = active_idle_periods_us(flow)
        series = active if fs.field is Field.ACTIVE else idle
        return _stat(fs.kind, [v / US for v in series])
    if fs.field is Field.PACKETS:
        n = len(_scoped_lengths(flow, fs.scope))
        if fs.kind is Kind.COUNT:
            return float(n)
        if fs.kind is Kind.RATE:
            return n / flow.duration
    if fs.field is Field.BYTES:
        total = sum(_scoped_lengths(flow, fs.scope))
        if fs.kind is Kind.RATE:
            return total / flow.duration
        if fs.kind is Kind.SUM:
            return float(total)
    if fs.kind is Kind.BURSTS:
        return float(microburst_count(flow))
    raise ValueError(f"unsupported feature {fs}")


def extract(flow: Flow, prof: Profile) -> np.ndarray:
    """Raw (unnormalized) feature vector for one flow, float64."""
    return np.array([_feature_value(flow, fs) for fs in prof], dtype=np.float64)


def extract_matrix(flows, prof: Profile) -> np.ndarray:
    return np.vstack([extract(f, prof) for f in flows])


def _exact_stat(kind: Kind, values: list[Fraction]) -> Fraction:
    if not values:
        return Fraction(0)
    if kind is Kind.SUM:
        return sum(values, Fraction(0))
    if kind is Kind.MIN:
        return min(values)
    if kind is Kind.MAX:
        return max(values)
    if kind is Kind.MEAN:
        return sum(values, Fraction(0)) / len(values)
    if kind is Kind.MEDIAN:
        ordered = sorted(values)
        m = len(ordered)
        if m % 2:
            return ordered[m // 2]
        return (ordered[m // 2 - 1] + ordered[m // 2]) / 2
    raise ValueError(f"{kind} has no exact rational form")


def extract_exact(flow: Flow, prof: Profile) -> dict[str, Fraction]:
    """Exact rational values for every feature with a rational closed form.

    Standard deviations are omitted (they involve a square root); everything
    else in the built-in profiles is a ratio of integers and is returned as a
    Fraction suitable for equality comparison.
    """
    out: dict[str, Fraction] = {}
    dur = Fraction(flow.duration_us, US)
    for fs in prof:
        if fs.kind is Kind.STD:
            continue
        if fs.field is Field.IAT and fs.kind is not Kind.BURSTS:
            gaps = [Fraction(g, US) for g in _scoped_gaps_us(flow, fs.scope)]
            out[fs.name] = _exact_stat(fs.kind, gaps)
        elif fs.field is Field.LENGTH and fs.kind is not Kind.UNIQUE:
            lengths = [Fraction(v) for v in _scoped_lengths(flow, fs.scope)]
            out[fs.name] = _exact_stat(fs.kind, lengths)
        elif fs.field is Field.LENGTH and fs.kind is Kind.UNIQUE:
            out[fs.name] = Fraction(len(set(_scoped_lengths(flow, fs.scope))))
        elif fs.field in (Field.ACTIVE, Field.IDLE):
            active, idle = active_idle_periods_us(flow)
            series = active if fs.field is Field.ACTIVE else idle
            out[fs.name] = _exact_stat(fs.kind, [Fraction(v, US) for v in series])
        elif fs.field is Field.PACKETS and fs.kind is Kind.COUNT:
            out[fs.name] = Fraction(len(_scoped_lengths(flow, fs.scope)))
        elif fs.field is Field.PACKETS and fs.kind is Kind.RATE:
            out[fs.name] = Fraction(len(_scoped_lengths(flow, fs.scope))) / dur
        elif fs.field is Field.BYTES and fs.kind is Kind.RATE:
            out[fs.name] = Fraction(sum(_scoped_lengths(flow, fs.scope))) / dur
        elif fs.field is Field.BYTES and fs.kind is Kind.SUM:
            out[fs.name] = Fraction(sum(_scoped_lengths(flow, fs.scope)))
        elif fs.kind is Kind.BURSTS:
            out[fs.name] = Fraction(microburst_count(flow))
        else:
            raise ValueError(f"unsupported feature {fs}")
    return out


class Normalizer:
    """Min-max scaler fitted on a training matrix, serializable to JSON."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, names: list[str]):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.names = list(names)
        if self.lo.shape != self.hi.shape or len(self.names) != self.lo.size:
            raise ValueError("normalizer shape mismatch")

    @classmethod
    def fit(cls, matrix: np.ndarray, prof: Profile) -> "Normalizer":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != len(prof):
            raise ValueError("matrix does not match profile width")
        return cls(matrix.min(axis=0), matrix.max(axis=0), [fs.name for fs in prof])

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        span = self.hi - self.lo
        safe = np.where(span == 0.0, 1.0, span)
        out = (x - self.lo) / safe
        return np.where(span == 0.0, 0.0, out)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return self.lo + z * (self.hi - self.lo)

    def to_json(self) -> dict:
        return {
            "names": self.names,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Normalizer":
        return cls(np.array(data["lo"]), np.array(data["hi"]), data["names"])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Normalizer":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))
