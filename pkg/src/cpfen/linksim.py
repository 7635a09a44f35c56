"""Cyclic wireless exchange between one master and its nodes.

Each cycle every node gets up to subcycles_per_cycle delivery attempts; an
attempt fails independently with the node's subcycle_loss_prob. Success on
attempt n costs n-1 retransmissions; a fully lost cycle costs
subcycles_per_cycle - 1 retransmissions and advances the loss counters.
Port status is derived from consecutive losses: below stale_threshold the
link is OPERATE, from stale_threshold up it is COMM_WARN, and from
lost_threshold up COMM_LOST.

All randomness comes from per-node streams derived from the run seed, so a
node's outcome sequence does not depend on which other nodes share the
master.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .frames import PhysicalReading, encode_frame
from .seeds import derive_rng
from .topology import MasterConfig

DEFAULT_STALE_THRESHOLD = 3
DEFAULT_LOST_THRESHOLD = 10
RSSI_JITTER_DB = 2.0


class UnknownNodeError(KeyError):
    pass


class PortStatus(enum.Enum):
    OPERATE = "OPERATE"
    COMM_WARN = "COMM_WARN"
    COMM_LOST = "COMM_LOST"


@dataclass(frozen=True)
class Delivery:
    """One node's cycle result; frame is None when every attempt failed."""

    frame: bytes | None
    attempts_used: int

    @property
    def delivered(self) -> bool:
        return self.frame is not None


@dataclass(frozen=True)
class CycleOutcome:
    master_id: str
    cycle_index: int
    deliveries: dict[str, Delivery]


@dataclass(frozen=True)
class NodeDiagnostics:
    rssi_dbm: float
    lost_frames: int
    retransmissions: int
    consecutive_losses: int
    port_status: PortStatus


class _LinkState:
    __slots__ = ("loss_prob", "rssi_base", "rssi_dbm", "lost_frames",
                 "retransmissions", "consecutive_losses", "rng")

    def __init__(self, loss_prob: float, rssi_base: float, rng):
        self.loss_prob = loss_prob
        self.rssi_base = rssi_base
        self.rssi_dbm = rssi_base
        self.lost_frames = 0
        self.retransmissions = 0
        self.consecutive_losses = 0
        self.rng = rng


class MasterSim:
    """Simulated master advancing one cycle at a time.

    Not thread safe; the owning driver serializes stepping and reads.
    """

    def __init__(self, master: MasterConfig, seed: int,
                 stale_threshold: int = DEFAULT_STALE_THRESHOLD,
                 lost_threshold: int = DEFAULT_LOST_THRESHOLD):
        if not 0 < stale_threshold < lost_threshold:
            raise ValueError("need 0 < stale_threshold < lost_threshold")
        self.master = master
        self.stale_threshold = stale_threshold
        self.lost_threshold = lost_threshold
        self.cycle_index = 0
        self._rod_count = {n.node_id: len(n.rods) for n in master.nodes}
        self._links = {
            n.node_id: _LinkState(
                n.link.subcycle_loss_prob, n.link.rssi_base_dbm,
                derive_rng(seed, "link", master.master_id, n.node_id))
            for n in master.nodes
        }

    def _state(self, node_id: str) -> _LinkState:
        try:
            return self._links[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    def step_cycle(self, readings: dict[str, PhysicalReading]) -> CycleOutcome:
        """Advance one cycle; readings must cover exactly this master's nodes."""
        if readings.keys() != self._links.keys():
            missing = sorted(self._links.keys() - readings.keys())
            extra = sorted(readings.keys() - self._links.keys())
            raise ValueError(f"readings mismatch: missing {missing}, extra {extra}")
        subcycles = self.master.subcycles_per_cycle
        deliveries: dict[str, Delivery] = {}
        for node in self.master.nodes:
            state = self._links[node.node_id]
            state.rssi_dbm = state.rssi_base + RSSI_JITTER_DB * float(
                state.rng.standard_normal())
            frame = encode_frame(readings[node.node_id], self._rod_count[node.node_id])
            attempts = 0
            delivered = False
            for _ in range(subcycles):
                attempts += 1
                p = state.loss_prob
                failed = p >= 1.0 or (p > 0.0 and state.rng.uniform() < p)
                if not failed:
                    delivered = True
                    break
            if delivered:
                state.retransmissions += attempts - 1
                state.consecutive_losses = 0
                deliveries[node.node_id] = Delivery(frame=frame, attempts_used=attempts)
            else:
                state.retransmissions += subcycles - 1
                state.lost_frames += 1
                state.consecutive_losses += 1
                deliveries[node.node_id] = Delivery(frame=None, attempts_used=attempts)
        self.cycle_index += 1
        return CycleOutcome(master_id=self.master.master_id,
                            cycle_index=self.cycle_index, deliveries=deliveries)

    def port_status(self, node_id: str) -> PortStatus:
        consecutive = self._state(node_id).consecutive_losses
        if consecutive < self.stale_threshold:
            return PortStatus.OPERATE
        if consecutive < self.lost_threshold:
            return PortStatus.COMM_WARN
        return PortStatus.COMM_LOST

    def diagnostics_snapshot(self) -> dict[str, NodeDiagnostics]:
        return {
            node_id: NodeDiagnostics(
                rssi_dbm=state.rssi_dbm,
                lost_frames=state.lost_frames,
                retransmissions=state.retransmissions,
                consecutive_losses=state.consecutive_losses,
                port_status=self.port_status(node_id),
            )
            for node_id, state in self._links.items()
        }

    def reset_counters(self, node_id: str) -> None:
        """Zero the cumulative counters; the consecutive-loss streak stays."""
        state = self._state(node_id)
        state.lost_frames = 0
        state.retransmissions = 0
