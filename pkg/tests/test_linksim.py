from __future__ import annotations

import math

import pytest

from cpfen.frames import PhysicalReading, decode_frame
from cpfen.linksim import MasterSim, PortStatus, UnknownNodeError
from cpfen.topology import make_grid_topology


def grid_master(nu=1, nv=1, loss=0.0, **kwargs):
    topo = make_grid_topology(nu, nv, subcycle_loss_prob=loss, **kwargs)
    return topo.cells[0].masters[0]


def readings_for(master):
    out = {}
    for node in master.nodes:
        k = len(node.rods)
        out[node.node_id] = PhysicalReading(
            accel_g=((0.0, 0.0, 1.0),) + ((0.0, 0.0, 0.0),) * k,
            distance_mm=(100.0,) * k,
            central_valid=True,
            rod_valid=(True,) * k,
        )
    return out


class TestLossFree:
    def test_everything_delivers_first_attempt(self):
        master = grid_master(3, 3, loss=0.0)
        sim = MasterSim(master, seed=1)
        readings = readings_for(master)
        for _ in range(20):
            outcome = sim.step_cycle(readings)
            assert outcome.deliveries.keys() == readings.keys()
            for node in master.nodes:
                d = outcome.deliveries[node.node_id]
                assert d.delivered and d.attempts_used == 1
                back = decode_frame(d.frame, len(node.rods))
                assert back.accel_g[0] == pytest.approx((0.0, 0.0, 1.0))
        assert sim.cycle_index == 20
        for diag in sim.diagnostics_snapshot().values():
            assert diag.lost_frames == 0
            assert diag.retransmissions == 0
            assert diag.port_status is PortStatus.OPERATE


class TestTotalLoss:
    def test_thresholds(self):
        master = grid_master(1, 1, loss=1.0)
        sim = MasterSim(master, seed=1)
        readings = readings_for(master)
        expectations = {2: PortStatus.OPERATE, 3: PortStatus.COMM_WARN,
                        9: PortStatus.COMM_WARN, 10: PortStatus.COMM_LOST,
                        25: PortStatus.COMM_LOST}
        for cycle in range(1, 26):
            outcome = sim.step_cycle(readings)
            d = outcome.deliveries["N0_0"]
            assert not d.delivered and d.frame is None
            diag = sim.diagnostics_snapshot()["N0_0"]
            assert diag.lost_frames == cycle
            assert diag.consecutive_losses == cycle
            assert diag.retransmissions == 2 * cycle  # subcycles - 1 per lost cycle
            if cycle in expectations:
                assert diag.port_status is expectations[cycle]

    def test_mixed_nodes(self):
        master = grid_master(2, 1, loss=0.0, loss_prob_overrides={(1, 0): 1.0})
        sim = MasterSim(master, seed=5)
        readings = readings_for(master)
        for _ in range(12):
            sim.step_cycle(readings)
        diags = sim.diagnostics_snapshot()
        assert diags["N0_0"].port_status is PortStatus.OPERATE
        assert diags["N1_0"].port_status is PortStatus.COMM_LOST


class TestRecovery:
    def test_success_resets_streak(self):
        master = grid_master(1, 1, loss=0.6)
        sim = MasterSim(master, seed=11)
        readings = readings_for(master)
        prev_consecutive = 0
        saw_loss = saw_delivery_after_loss = False
        for _ in range(300):
            outcome = sim.step_cycle(readings)
            diag = sim.diagnostics_snapshot()["N0_0"]
            if outcome.deliveries["N0_0"].delivered:
                assert diag.consecutive_losses == 0
                assert diag.port_status is PortStatus.OPERATE
                if prev_consecutive > 0:
                    saw_delivery_after_loss = True
            else:
                assert diag.consecutive_losses == prev_consecutive + 1
                saw_loss = True
            prev_consecutive = diag.consecutive_losses
        assert saw_loss and saw_delivery_after_loss


class TestStatistics:
    def test_loss_rate_converges_to_p_cubed(self):
        # 20 nodes x 5000 cycles = 1e5 node-cycles at p = 0.1, 3 subcycles.
        master = grid_master(4, 5, loss=0.1)
        sim = MasterSim(master, seed=42)
        readings = readings_for(master)
        lost = 0
        cycles = 5000
        for _ in range(cycles):
            outcome = sim.step_cycle(readings)
            lost += sum(1 for d in outcome.deliveries.values() if not d.delivered)
        n = cycles * len(master.nodes)
        expected = 0.1 ** 3
        sigma = math.sqrt(n * expected * (1.0 - expected))
        assert abs(lost - n * expected) < 3.0 * sigma + 1.0

    def test_expected_retransmissions(self):
        # At p = 0.5 each cycle costs p + p^2 = 0.75 expected retransmissions:
        # one with probability p(1-p), two when the first two attempts fail
        # (probability p^2, delivered or not).
        master = grid_master(4, 5, loss=0.5)
        sim = MasterSim(master, seed=7)
        readings = readings_for(master)
        cycles = 5000
        for _ in range(cycles):
            sim.step_cycle(readings)
        total = sum(d.retransmissions for d in sim.diagnostics_snapshot().values())
        n = cycles * len(master.nodes)
        var = 1.25 - 0.75 ** 2  # E[r^2] - E[r]^2 at p = 0.5
        assert abs(total - 0.75 * n) < 3.0 * math.sqrt(n * var)

    def test_attempts_bounded_and_distributed(self):
        master = grid_master(2, 2, loss=0.5)
        sim = MasterSim(master, seed=3)
        readings = readings_for(master)
        histogram = {1: 0, 2: 0, 3: 0}
        for _ in range(2000):
            outcome = sim.step_cycle(readings)
            for d in outcome.deliveries.values():
                assert 1 <= d.attempts_used <= 3
                if d.delivered:
                    histogram[d.attempts_used] += 1
        assert histogram[1] > histogram[2] > histogram[3] > 0

    def test_rssi_jitters_around_base(self):
        master = grid_master(1, 1, loss=0.0)
        sim = MasterSim(master, seed=9)
        readings = readings_for(master)
        samples = []
        for _ in range(2000):
            sim.step_cycle(readings)
            samples.append(sim.diagnostics_snapshot()["N0_0"].rssi_dbm)
        mean = sum(samples) / len(samples)
        std = math.sqrt(sum((s - mean) ** 2 for s in samples) / len(samples))
        assert mean == pytest.approx(-60.0, abs=0.2)
        assert std == pytest.approx(2.0, abs=0.2)
        assert len(set(samples)) > 1900


class TestCounters:
    def test_conservation(self):
        master = grid_master(3, 2, loss=0.4)
        sim = MasterSim(master, seed=13)
        readings = readings_for(master)
        delivered = 0
        for _ in range(500):
            outcome = sim.step_cycle(readings)
            delivered += sum(1 for d in outcome.deliveries.values() if d.delivered)
        lost = sum(d.lost_frames for d in sim.diagnostics_snapshot().values())
        assert delivered + lost == sim.cycle_index * len(master.nodes)

    def test_reset_counters(self):
        master = grid_master(1, 1, loss=1.0)
        sim = MasterSim(master, seed=2)
        readings = readings_for(master)
        for _ in range(12):
            sim.step_cycle(readings)
        sim.reset_counters("N0_0")
        diag = sim.diagnostics_snapshot()["N0_0"]
        assert diag.lost_frames == 0
        assert diag.retransmissions == 0
        # The streak and the status derived from it survive a counter reset.
        assert diag.consecutive_losses == 12
        assert diag.port_status is PortStatus.COMM_LOST
        sim.reset_counters("N0_0")
        assert sim.diagnostics_snapshot()["N0_0"].lost_frames == 0

    def test_unknown_node(self):
        sim = MasterSim(grid_master(1, 1), seed=1)
        with pytest.raises(UnknownNodeError):
            sim.reset_counters("nope")
        with pytest.raises(UnknownNodeError):
            sim.port_status("nope")


class TestDeterminism:
    def test_same_seed_same_stream(self):
        master = grid_master(3, 3, loss=0.3)
        readings = readings_for(master)
        runs = []
        for _ in range(2):
            sim = MasterSim(master, seed=77)
            stream = []
            for _ in range(100):
                outcome = sim.step_cycle(readings)
                stream.append([(n, d.frame, d.attempts_used)
                               for n, d in sorted(outcome.deliveries.items())])
            runs.append((stream, sim.diagnostics_snapshot()))
        assert runs[0] == runs[1]

    def test_different_seed_differs(self):
        master = grid_master(2, 2, loss=0.3)
        readings = readings_for(master)

        def trace(seed):
            sim = MasterSim(master, seed=seed)
            return [tuple(d.delivered for _, d in sorted(out.deliveries.items()))
                    for out in (sim.step_cycle(readings) for _ in range(50))]

        assert trace(1) != trace(2)

    def test_node_stream_independent_of_peers(self):
        # The same node alone on the master sees the same outcomes as when
        # it shares the master with others.
        full = grid_master(2, 2, loss=0.4)
        sim_full = MasterSim(full, seed=21)
        readings_full = readings_for(full)
        solo_nodes = tuple(n for n in full.nodes if n.node_id == "N0_0")
        solo = type(full)(master_id=full.master_id, nodes=solo_nodes,
                          cycle_ms=full.cycle_ms,
                          subcycles_per_cycle=full.subcycles_per_cycle)
        sim_solo = MasterSim(solo, seed=21)
        readings_solo = {"N0_0": readings_full["N0_0"]}
        for _ in range(100):
            a = sim_full.step_cycle(readings_full).deliveries["N0_0"]
            b = sim_solo.step_cycle(readings_solo).deliveries["N0_0"]
            assert (a.frame, a.attempts_used) == (b.frame, b.attempts_used)


class TestInputChecks:
    def test_readings_must_match_nodes(self):
        master = grid_master(2, 1)
        sim = MasterSim(master, seed=1)
        readings = readings_for(master)
        short = dict(readings)
        short.popitem()
        with pytest.raises(ValueError, match="missing"):
            sim.step_cycle(short)
        extra = dict(readings)
        extra["ghost"] = next(iter(readings.values()))
        with pytest.raises(ValueError, match="extra"):
            sim.step_cycle(extra)

    def test_threshold_ordering_enforced(self):
        master = grid_master(1, 1)
        with pytest.raises(ValueError):
            MasterSim(master, seed=1, stale_threshold=5, lost_threshold=5)
        with pytest.raises(ValueError):
            MasterSim(master, seed=1, stale_threshold=0, lost_threshold=3)
