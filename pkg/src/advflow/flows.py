"""Packet-level flow records, canonical serialization, and synthetic corpora.

Inter-arrival times are stored as integer microseconds so that values survive
JSON round trips and solver output byte-for-byte.  Helpers expose seconds as
floats (for feature math) and exact fractions (for the fidelity checks).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

US = 10**6
MAX_STORED_LENGTH = 1500


class Direction(IntEnum):
    FWD = 1
    BWD = -1


def micros_from_text(text: str) -> int:
    """Parse a decimal seconds literal with at most six fractional digits."""
    text = text.strip()
    if text.startswith("-"):
        raise ValueError(f"negative inter-arrival time: {text!r}")
    whole, _, frac = text.partition(".")
    if len(frac) > 6:
        raise ValueError(
            f"inter-arrival time {text!r} has more than microsecond precision"
        )
    whole_us = int(whole or "0") * US
    frac_us = int(frac.ljust(6, "0") or "0")
    return whole_us + frac_us


def micros_to_text(us: int) -> str:
    """Render integer microseconds as canonical seconds with 6 fractional digits."""
    return f"{us // US}.{us % US:06d}"


class _IatLiteral(float):
    """Float subclass that remembers the exact JSON literal it came from."""

    literal: str

    def __new__(cls, literal: str):
        self = super().__new__(cls, float(literal))
        self.literal = literal
        return self


@dataclass(frozen=True)
class Packet:
    """One packet: inter-arrival gap to its predecessor, wire length, direction."""

    iat_us: int
    length: int
    direction: Direction

    def __post_init__(self):
        if self.iat_us < 0:
            raise ValueError(f"packet iat must be >= 0, got {self.iat_us} us")
        if not 1 <= self.length <= MAX_STORED_LENGTH:
            raise ValueError(
                f"packet length must be in [1, {MAX_STORED_LENGTH}], got {self.length}"
            )
        if self.direction not in (Direction.FWD, Direction.BWD):
            raise ValueError(f"bad packet direction: {self.direction!r}")

    @property
    def iat(self) -> float:
        return self.iat_us / US

    @property
    def iat_frac(self) -> Fraction:
        return Fraction(self.iat_us, US)


@dataclass(frozen=True)
class Flow:
    """An ordered packet sequence with a string id and class label."""

    id: str
    label: str
    packets: tuple[Packet, ...]

    def __post_init__(self):
        if not self.id:
            raise ValueError("flow id must be non-empty")
        if len(self.packets) < 2:
            raise ValueError(f"flow {self.id!r} has fewer than 2 packets")
        if self.packets[0].iat_us != 0:
            raise ValueError(f"flow {self.id!r}: first packet iat must be 0")
        if self.duration_us <= 0:
            raise ValueError(f"flow {self.id!r} has zero duration")

    @property
    def duration_us(self) -> int:
        return sum(p.iat_us for p in self.packets)

    @property
    def duration(self) -> float:
        return self.duration_us / US

    def times_us(self) -> list[int]:
        """Absolute arrival times in microseconds, starting at 0."""
        out, t = [], 0
        for p in self.packets:
            t += p.iat_us
            out.append(t)
        return out

    def subflow(self, direction: Direction) -> list[int]:
        """Indices of packets travelling in `direction`, in arrival order."""
        return [i for i, p in enumerate(self.packets) if p.direction is direction]


@dataclass(frozen=True)
class Dataset:
    """A labelled flow corpus with a fixed class ordering."""

    flows: tuple[Flow, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class names")
        seen = set()
        for f in self.flows:
            if f.id in seen:
                raise ValueError(f"duplicate flow id {f.id!r}")
            seen.add(f.id)
            if f.label not in self.classes:
                raise ValueError(f"flow {f.id!r} has unknown label {f.label!r}")

    def __len__(self) -> int:
        return len(self.flows)

    def labels(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[f.label] for f in self.flows], dtype=np.int64)

    def by_id(self, flow_id: str) -> Flow:
        for f in self.flows:
            if f.id == flow_id:
                return f
        raise KeyError(flow_id)


def _packet_from_json(entry, flow_id: str) -> Packet:
    iat, length, direction = entry
    if isinstance(iat, _IatLiteral):
        us = micros_from_text(iat.literal)
    elif isinstance(iat, str):
        us = micros_from_text(iat)
    elif isinstance(iat, int):
        us = iat * US
    else:
        raise ValueError(f"flow {flow_id!r}: unparseable iat {iat!r}")
    return Packet(us, int(length), Direction(int(direction)))


def load_flows(path: str | Path) -> Dataset:
    """Read a JSONL flow file.  Single-packet flows are dropped with a warning."""
    flows: list[Flow] = []
    classes: list[str] = []
    dropped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line, parse_float=_IatLiteral)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                fid, label = rec["id"], rec["label"]
                raw_packets = rec["packets"]
                if len(raw_packets) < 2:
                    dropped += 1
                    continue
                packets = tuple(_packet_from_json(e, fid) for e in raw_packets)
                flow = Flow(fid, label, packets)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            flows.append(flow)
            if label not in classes:
                classes.append(label)
    if dropped:
        log.warning("dropped %d single-packet flow(s) from %s", dropped, path)
    return Dataset(tuple(flows), tuple(classes))


def flow_to_record(flow: Flow) -> dict:
    return {
        "id": flow.id,
        "label": flow.label,
        "packets": [
            [micros_to_text(p.iat_us), p.length, int(p.direction)] for p in flow.packets
        ],
    }


def flow_from_record(rec) -> Flow:
    """Inverse of flow_to_record for one already-parsed JSON object."""
    fid = rec["id"]
    packets = tuple(_packet_from_json(e, fid) for e in rec["packets"])
    return Flow(fid, rec["label"], packets)


def save_flows(dataset: Dataset, path: str | Path) -> None:
    """Write canonical JSONL: sorted keys, compact separators, 6-digit iats."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for flow in dataset.flows:
            fh.write(
                json.dumps(flow_to_record(flow), sort_keys=True, separators=(",", ":"))
            )
            fh.write("\n")


@dataclass(frozen=True)
class ClassSpec:
    """Sampling parameters for one synthetic traffic class.

    Inter-arrival times are log-normal in seconds.  Lengths are drawn from a
    small-packet range with probability `small_weight`, otherwise MTU-sized.
    `alternation` is the chance that consecutive packets flip direction.
    """

    iat_mu: float
    iat_sigma: float
    small_length: tuple[int, int] = (40, 120)
    small_weight: float = 0.5
    alternation: float = 0.5
    n_packets: tuple[int, int] = (8, 24)

    def __post_init__(self):
        if self.iat_sigma <= 0:
            raise ValueError("iat_sigma must be > 0")
        if not 0.0 <= self.small_weight <= 1.0:
            raise ValueError("small_weight must be in [0, 1]")
        if not 0.0 < self.alternation < 1.0:
            raise ValueError("alternation must be in (0, 1)")
        lo, hi = self.n_packets
        if lo < 4 or hi < lo:
            raise ValueError("n_packets range must satisfy 4 <= lo <= hi")
        slo, shi = self.small_length
        if not 1 <= slo <= shi <= MAX_STORED_LENGTH:
            raise ValueError("bad small_length range")


@dataclass(frozen=True)
class SyntheticSpec:
    """Full recipe for a synthetic corpus: one ClassSpec per class label."""

    classes: dict[str, ClassSpec]
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")


def _sample_flow(rng: np.random.Generator, fid: str, label: str, cs: ClassSpec) -> Flow:
    n = int(rng.integers(cs.n_packets[0], cs.n_packets[1] + 1))
    iats = rng.lognormal(cs.iat_mu, cs.iat_sigma, size=n)
    iats_us = np.maximum(1, np.rint(iats * US).astype(np.int64))
    iats_us[0] = 0
    small = rng.random(n) < cs.small_weight
    lengths = np.where(
        small,
        rng.integers(cs.small_length[0], cs.small_length[1] + 1, size=n),
        MAX_STORED_LENGTH,
    )
    dirs = [Direction.FWD]
    for _ in range(n - 1):
        flip = rng.random() < cs.alternation
        dirs.append(Direction(-int(dirs[-1])) if flip else dirs[-1])
    packets = tuple(
        Packet(int(iats_us[i]), int(lengths[i]), dirs[i]) for i in range(n)
    )
    return Flow(fid, label, packets)


def synthesize(spec: SyntheticSpec, n_per_class: int) -> Dataset:
    """Generate a deterministic corpus; every flow has >= 2 packets per direction."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(spec.seed)
    flows = []
    for label, cs in spec.classes.items():
        for i in range(n_per_class):
            fid = f"{label}-{i:05d}"
            for _ in range(200):
                flow = _sample_flow(rng, fid, label, cs)
                if (
                    len(flow.subflow(Direction.FWD)) >= 2
                    and len(flow.subflow(Direction.BWD)) >= 2
                ):
                    break
            else:
                raise RuntimeError(
                    f"could not sample a bidirectional flow for class {label!r}"
                )
            flows.append(flow)
    return Dataset(tuple(flows), tuple(spec.classes))


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic stratified split into train and test datasets."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[Flow]] = {c: [] for c in dataset.classes}
    for f in dataset.flows:
        by_class[f.label].append(f)
    train: list[Flow] = []
    test: list[Flow] = []
    for c in dataset.classes:
        group = by_class[c]
        if len(group) < 2:
            raise ValueError(f"class {c!r} has fewer than 2 flows; cannot split")
        order = rng.permutation(len(group))
        n_train = round(train_fraction * len(group))
        n_train = min(max(n_train, 1), len(group) - 1)
        chosen = set(order[:n_train].tolist())
        for i, f in enumerate(group):
            (train if i in chosen else test).append(f)
    id_pos = {f.id: i for i, f in enumerate(dataset.flows)}
    train.sort(key=lambda f: id_pos[f.id])
    test.sort(key=lambda f: id_pos[f.id])
    return (
        Dataset(tuple(train), dataset.classes),
        Dataset(tuple(test), dataset.classes),
    )
