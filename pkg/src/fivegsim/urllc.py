"""Redundant user-plane transmission and duplicate elimination.

Three mechanisms are modeled on top of ordinary PDU sessions:

* DUAL_CONNECTIVITY: two disjoint paths through two gNBs and two UPFs; the
  endpoints replicate and eliminate (UE uplink, server downlink).
* N3_REPLICATION: one gNB and one UPF joined by two GTP-U tunnels; the gNB
  and UPF replicate/eliminate at the tunnel ends.
* PSA_ANCHOR: per-UPF tunnels that converge on a common PSA UPF, which
  eliminates uplink duplicates and replicates downlink.

Replicated copies of one user packet always carry the same sequence number;
elimination keeps the first arrival inside a 1,024-wide window over a 16-bit
wrapping sequence space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

SEQ_MODULUS = 1 << 16
DEDUP_WINDOW = 1024


class Redundancy(Enum):
    NONE = "NONE"
    DUAL_CONNECTIVITY = "DUAL_CONNECTIVITY"
    N3_REPLICATION = "N3_REPLICATION"
    PSA_ANCHOR = "PSA_ANCHOR"

    @classmethod
    def parse(cls, name: str) -> "Redundancy":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            valid = ", ".join(m.name for m in cls)
            raise ValueError(f"unknown redundancy mode {name!r} (expected one of {valid})") from None


@dataclass(frozen=True)
class RedundancyMode:
    """A resolved redundancy plan: which paths carry the session."""

    mode: Redundancy
    paths: tuple[tuple[str, str], ...] = ()  # (gnb name, upf name) per path
    psa_upf: str | None = None

    def validate(self) -> None:
        if self.mode is Redundancy.NONE:
            if len(self.paths) != 1:
                raise ValueError("mode NONE uses exactly one path")
        elif self.mode is Redundancy.DUAL_CONNECTIVITY:
            if len(self.paths) != 2:
                raise ValueError("dual connectivity uses exactly two paths")
            gnbs = {g for g, _ in self.paths}
            upfs = {u for _, u in self.paths}
            if len(gnbs) != 2 or len(upfs) != 2:
                raise ValueError("dual connectivity needs two distinct gNBs and two distinct UPFs")
        elif self.mode is Redundancy.N3_REPLICATION:
            if len(self.paths) != 2:
                raise ValueError("N3 replication uses exactly two tunnels")
            if len({g for g, _ in self.paths}) != 1 or len({u for _, u in self.paths}) != 1:
                raise ValueError("N3 replication keeps one gNB and one UPF")
        elif self.mode is Redundancy.PSA_ANCHOR:
            if self.psa_upf is None:
                raise ValueError("PSA anchor mode needs a psa_upf")
            if len(self.paths) != 2:
                raise ValueError("PSA anchor mode uses two tunnels")


def seq_newer(a: int, b: int) -> bool:
    """Serial-number comparison: is a strictly newer than b, mod 2**16."""
    return a != b and ((a - b) % SEQ_MODULUS) < SEQ_MODULUS // 2


class DedupWindow:
    """First-arrival filter over a wrapping 16-bit sequence space.

    accept(seq) returns True for the first copy of a sequence number and
    False for any later copy still inside the window. Sequences that have
    fallen out of the window cannot be proven duplicate and pass.
    """

    def __init__(self, window: int = DEDUP_WINDOW):
        self.window = window
        self.highest: int | None = None
        self._seen: set[int] = set()

    def _in_window(self, seq: int) -> bool:
        assert self.highest is not None
        return ((self.highest - seq) % SEQ_MODULUS) < self.window

    def accept(self, seq: int) -> bool:
        seq %= SEQ_MODULUS
        if self.highest is None:
            self.highest = seq
            self._seen.add(seq)
            return True
        if seq in self._seen and self._in_window(seq):
            return False
        if seq_newer(seq, self.highest):
            self.highest = seq
            if len(self._seen) > 2 * self.window:
                self._seen = {s for s in self._seen if self._in_window(s)}
        if self._in_window(seq):
            self._seen.add(seq)
        return True


def eliminate_duplicates(stream, window: int = DEDUP_WINDOW) -> list:
    """Filter a stream of items down to first arrivals.

    Items are either bare sequence numbers or (seq, payload) pairs; output
    preserves first-arrival order.
    """
    win = DedupWindow(window)
    out = []
    for item in stream:
        seq = item if isinstance(item, int) else item[0]
        if win.accept(seq):
            out.append(item)
    return out


@dataclass(frozen=True)
class ReliabilityResult:
    """Outcome of one delivery-reliability measurement."""

    mode: Redundancy
    loss_prob: float
    sent: int
    delivered: int
    per_tunnel_delivered: dict[int, int] = field(default_factory=dict)
    paths_disjoint: bool = True
    delivered_indices: frozenset = frozenset()

    @property
    def delivery_ratio(self) -> float:
        return self.delivered / self.sent if self.sent else 0.0

    @property
    def observed_loss(self) -> float:
        return 1.0 - self.delivery_ratio


def measure_delivery_reliability(
    mode: Redundancy,
    loss_prob: float,
    n_packets: int,
    seed: int,
    topology=None,
) -> ReliabilityResult:
    """Send n uplink data units through a session in the given mode and count
    post-elimination arrivals at the application server.

    Loss is applied independently on every N3 (gNB-UPF) link; the radio and
    N6/N9 legs stay lossless so the observed loss isolates the tunnel legs.
    """
    from . import runner  # deferred: runner imports this module

    return runner.run_reliability_measurement(mode, loss_prob, n_packets, seed, topology)
