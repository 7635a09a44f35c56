"""Stepped simulation behind the address space.

The driver owns one MasterSim per configured master and advances them on a
shared logical clock. Each tick is tick_ms of simulated time, the fastest
master's cycle; slower masters run on integer multiples of it. When a
master cycles, the driver synthesizes sensor readings from the surface,
pushes them through the wireless simulation, decodes whatever arrived, and
publishes calibrated values, statuses, and diagnostics into the address
space. Nothing here touches wall-clock time; the server decides whether to
pace ticks.

Calibration is applied gateway-side: published acceleration is
raw * scale - bias componentwise and published distance is raw + offset.
The Calibrate method fits those parameters from a window of buffered raw
frames against the flat-at-rest reference, storing offset = nominal - mean
measured so that applying it corrects the systematic error.

The driver is not thread safe; the server serializes access with a lock,
which also gives clients cycle-consistent snapshots.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .addrspace import (
    BAD_COMM_LOST,
    BAD_METHOD_INVALID,
    BAD_NODE_ID_UNKNOWN,
    BAD_PRECONDITION,
    GOOD,
    UNCERTAIN_LAST_USABLE,
    AddressSpace,
    build_address_space,
)
from .frames import PhysicalReading, decode_frame
from .linksim import MasterSim, PortStatus
from .seeds import derive_rng
from .surface import (
    NoiseModel,
    Pose,
    SurfaceModel,
    sample_rod_pose,
    synth_accel,
    synth_distance,
)
from .topology import NetworkTopology, SensorNodeConfig

DEFAULT_CALIB_WINDOW = 16

_STATUS_FOR_PORT = {
    PortStatus.OPERATE: GOOD,
    PortStatus.COMM_WARN: UNCERTAIN_LAST_USABLE,
    PortStatus.COMM_LOST: BAD_COMM_LOST,
}


@dataclass(frozen=True)
class MethodResult:
    status: str
    payload: dict


class SimulationDriver:
    def __init__(self, topology: NetworkTopology, surface: SurfaceModel,
                 noise: NoiseModel = NoiseModel(), seed: int = 0,
                 stale_threshold: int = 3, lost_threshold: int = 10,
                 calib_window: int = DEFAULT_CALIB_WINDOW,
                 pitch_mm: float | None = None):
        self.topology = topology
        self.surface = surface
        self.noise = noise
        self.space: AddressSpace = build_address_space(topology)
        self.calib_window = calib_window
        self.pitch_mm = pitch_mm if pitch_mm is not None else _infer_pitch(topology)

        self._nodes: dict[str, SensorNodeConfig] = {}
        self._masters: dict[str, MasterSim] = {}
        self._strides: dict[str, int] = {}
        self._obs_rng = {}
        self._raw: dict[str, deque[PhysicalReading]] = {}

        cycle_times = [m.cycle_ms for c in topology.cells for m in c.masters]
        self.tick_ms = min(cycle_times)
        for cell in topology.cells:
            for master in cell.masters:
                stride = round(master.cycle_ms / self.tick_ms)
                if abs(stride * self.tick_ms - master.cycle_ms) > 1e-9:
                    raise ValueError(
                        f"master '{master.master_id}' cycle {master.cycle_ms} ms "
                        f"is not an integer multiple of the fastest cycle "
                        f"{self.tick_ms} ms")
                self._strides[master.master_id] = stride
                self._masters[master.master_id] = MasterSim(
                    master, seed=seed, stale_threshold=stale_threshold,
                    lost_threshold=lost_threshold)
                for node in master.nodes:
                    self._nodes[node.node_id] = node
                    self._obs_rng[node.node_id] = derive_rng(seed, "obs", node.node_id)
                    self._raw[node.node_id] = deque(maxlen=calib_window)

        self._poses: dict[str, Pose] = {
            node_id: surface.pose(n.grid_u * self.pitch_mm, n.grid_v * self.pitch_mm)
            for node_id, n in self._nodes.items()
        }
        self._rod_poses: dict[str, tuple[Pose, ...]] = {
            node_id: tuple(
                sample_rod_pose(self._poses[node_id],
                                self._poses[rod.neighbor_node_id])
                for rod in sorted(n.rods, key=lambda r: r.data_index))
            for node_id, n in self._nodes.items()
        }
        self.tick_count = 0

    # -- clock --

    @property
    def time_ms(self) -> float:
        return self.tick_count * self.tick_ms

    def step(self) -> None:
        """Advance the clock by one tick, cycling every master that is due."""
        self.tick_count += 1
        for master_id, sim in self._masters.items():
            if self.tick_count % self._strides[master_id] == 0:
                self._cycle_master(master_id, sim)

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.step()

    # -- per-cycle work --

    def _synth_reading(self, node: SensorNodeConfig) -> PhysicalReading:
        rng = self._obs_rng[node.node_id]
        accel = [synth_accel(self._poses[node.node_id], self.noise, rng)]
        distance = []
        rods = sorted(node.rods, key=lambda r: r.data_index)
        for rod, rod_pose in zip(rods, self._rod_poses[node.node_id]):
            accel.append(synth_accel(rod_pose, self.noise, rng))
            distance.append(synth_distance(
                self._poses[node.node_id], self._poses[rod.neighbor_node_id],
                self.noise, rng))
        k = len(rods)
        return PhysicalReading(accel_g=tuple(accel), distance_mm=tuple(distance),
                               central_valid=True, rod_valid=(True,) * k)

    def _cycle_master(self, master_id: str, sim: MasterSim) -> None:
        readings = {n.node_id: self._synth_reading(n) for n in sim.master.nodes}
        outcome = sim.step_cycle(readings)
        now = sim.cycle_index * sim.master.cycle_ms
        for node in sim.master.nodes:
            delivery = outcome.deliveries[node.node_id]
            if delivery.delivered:
                raw = decode_frame(delivery.frame, len(node.rods))
                self._raw[node.node_id].append(raw)
                self._publish_process(node, raw, now)
        diags = sim.diagnostics_snapshot()
        for node in sim.master.nodes:
            binding = self.space.bindings[node.node_id]
            diag = diags[node.node_id]
            link_status = _STATUS_FOR_PORT[diag.port_status]
            for var in binding.process_variables():
                self.space.set_status(var, link_status)
            self.space.set_value(binding.rssi, diag.rssi_dbm, now, GOOD)
            self.space.set_value(binding.lost_frames, diag.lost_frames, now, GOOD)
            self.space.set_value(binding.retransmissions, diag.retransmissions,
                                 now, GOOD)
            self.space.set_value(binding.port_status, diag.port_status.value,
                                 now, GOOD)
        mb = self.space.master_bindings[master_id]
        connected = sum(1 for d in diags.values()
                        if d.port_status is not PortStatus.COMM_LOST)
        self.space.set_value(mb.cycle_index, sim.cycle_index, now, GOOD)
        self.space.set_value(mb.connected_nodes, connected, now, GOOD)
        cb = self.space.cell_bindings[self.space.bindings[
            sim.master.nodes[0].node_id].cell_id] if sim.master.nodes else None
        if cb is not None:
            cell_connected = 0
            for mid in cb.master_ids:
                peer = self._masters[mid]
                peer_diags = peer.diagnostics_snapshot()
                cell_connected += sum(
                    1 for d in peer_diags.values()
                    if d.port_status is not PortStatus.COMM_LOST)
            self.space.set_value(cb.connected_nodes, cell_connected, now, GOOD)

    def _publish_process(self, node: SensorNodeConfig, raw: PhysicalReading,
                         now: float) -> None:
        binding = self.space.bindings[node.node_id]
        for i in range(raw.rod_count + 1):
            valid = raw.central_valid if i == 0 else raw.rod_valid[i - 1]
            if not valid:
                self.space.set_status(binding.accel[i], UNCERTAIN_LAST_USABLE)
                if i > 0:
                    self.space.set_status(binding.distance[i - 1],
                                          UNCERTAIN_LAST_USABLE)
                continue
            scale = self.space.read_value(binding.scale[i]).value
            bias = self.space.read_value(binding.bias[i]).value
            published = tuple(r * s - b for r, s, b
                              in zip(raw.accel_g[i], scale, bias))
            self.space.set_value(binding.accel[i], published, now, GOOD)
            if i > 0:
                offset = self.space.read_value(binding.offset[i - 1]).value
                self.space.set_value(binding.distance[i - 1],
                                     raw.distance_mm[i - 1] + offset, now, GOOD)

    # -- client-facing entry points (server serializes) --

    def write(self, node_id: str, value) -> str:
        return self.space.write_value(node_id, value, timestamp_ms=self.time_ms)

    def call_method(self, method_id: str, args: dict | None = None) -> MethodResult:
        if method_id not in self.space.nodes:
            return MethodResult(BAD_NODE_ID_UNKNOWN, {})
        target = self.space.method_target(method_id)
        if target is None:
            return MethodResult(BAD_METHOD_INVALID, {})
        name, node_id = target
        if name == "Calibrate":
            return self._calibrate(node_id)
        return self._reset_counters(node_id)

    def _calibrate(self, node_id: str) -> MethodResult:
        buffered = self._raw[node_id]
        if len(buffered) < self.calib_window:
            return MethodResult(BAD_PRECONDITION, {
                "required": self.calib_window, "buffered": len(buffered)})
        node = self._nodes[node_id]
        binding = self.space.bindings[node_id]
        window = list(buffered)[-self.calib_window:]
        now = self.time_ms
        biases = []
        for i in range(binding.rod_count + 1):
            mean = np.mean([r.accel_g[i] for r in window], axis=0)
            bias = tuple(float(b) for b in mean - np.array([0.0, 0.0, 1.0]))
            self.space.set_value(binding.bias[i], bias, now, GOOD)
            biases.append(list(bias))
        offsets = []
        rods = sorted(node.rods, key=lambda r: r.data_index)
        for i, rod in enumerate(rods):
            mean = float(np.mean([r.distance_mm[i] for r in window]))
            offset = rod.nominal_length_mm - mean
            self.space.set_value(binding.offset[i], offset, now, GOOD)
            offsets.append(offset)
        return MethodResult(GOOD, {"accel_bias": biases,
                                   "distance_offset": offsets})

    def _reset_counters(self, node_id: str) -> MethodResult:
        binding = self.space.bindings[node_id]
        sim = self._masters[binding.master_id]
        sim.reset_counters(node_id)
        diag = sim.diagnostics_snapshot()[node_id]
        now = self.time_ms
        self.space.set_value(binding.lost_frames, diag.lost_frames, now, GOOD)
        self.space.set_value(binding.retransmissions, diag.retransmissions,
                             now, GOOD)
        return MethodResult(GOOD, {})

    # -- test and tooling hooks --

    def ground_truth(self) -> dict[str, np.ndarray]:
        """True node positions on the surface (mm), keyed by node id."""
        return {node_id: pose.position.copy()
                for node_id, pose in self._poses.items()}

    def master_cycle_index(self, master_id: str) -> int:
        return self._masters[master_id].cycle_index


def _infer_pitch(topology: NetworkTopology) -> float:
    for _, _, node in topology.iter_nodes():
        for rod in node.rods:
            return rod.nominal_length_mm
    return 100.0
