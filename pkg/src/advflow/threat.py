"""Attacker capability envelopes.

Two stock envelopes: an end-host attacker who can delay its own outgoing
packets, inject new outgoing packets, and pad payloads; and an in-path
attacker who can only hold packets back (no injection, no padding).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from .flows import Direction


class ThreatKind(str, Enum):
    END_HOST = "end_host"
    IN_PATH = "in_path"


@dataclass(frozen=True)
class ThreatModel:
    """What the attacker may do to a flow, with hard budgets.

    delay_budget_frac caps total added delay at a fraction of the original
    flow duration.  payload_fraction caps how many packets may receive
    padding.  Injected packets always travel in the attacker's direction
    and must have positive inter-arrival gaps.
    """

    kind: ThreatKind
    delay_budget_frac: float = 0.2
    max_inject: int = 20
    payload_fraction: float = 0.2
    mtu: int = 1500
    min_inject_length: int = 40
    min_iat_us: int = 1
    max_packets: int = 400
    attacker_direction: Direction = Direction.FWD

    def __post_init__(self):
        if not 0.0 <= self.delay_budget_frac <= 1.0:
            raise ValueError("delay_budget_frac must be in [0, 1]")
        if self.max_inject < 0:
            raise ValueError("max_inject must be >= 0")
        if not 0.0 <= self.payload_fraction <= 1.0:
            raise ValueError("payload_fraction must be in [0, 1]")
        if not 1 <= self.min_inject_length <= self.mtu:
            raise ValueError("min_inject_length must be in [1, mtu]")
        if self.min_iat_us < 1:
            raise ValueError("min_iat_us must be >= 1")
        if self.kind is ThreatKind.IN_PATH and (
            self.max_inject != 0 or self.payload_fraction != 0.0
        ):
            raise ValueError("in-path attackers cannot inject or pad")

    @property
    def budget_frac(self) -> Fraction:
        """Exact decimal reading of the delay budget fraction.

        Encoder and validator must agree to the last microsecond, so both
        read the float through its shortest decimal representation.
        """
        return Fraction(str(self.delay_budget_frac))

    @property
    def pad_frac(self) -> Fraction:
        return Fraction(str(self.payload_fraction))

    @property
    def can_inject(self) -> bool:
        return self.max_inject > 0

    @property
    def can_pad(self) -> bool:
        return self.payload_fraction > 0.0

    @classmethod
    def end_host(cls, **overrides) -> "ThreatModel":
        return cls(kind=ThreatKind.END_HOST, **overrides)

    @classmethod
    def in_path(cls, **overrides) -> "ThreatModel":
        overrides.setdefault("max_inject", 0)
        overrides.setdefault("payload_fraction", 0.0)
        return cls(kind=ThreatKind.IN_PATH, **overrides)
