import numpy as np
import pytest

from adaptive_tamaraw.adaptive import (AdaptiveConfig, NeverDetector,
                                       OracleDetector, bandwidth_auc,
                                       evaluate, out_of_training_eval,
                                       savings_histogram, simulate_trace,
                                       time_budget_table)
from adaptive_tamaraw.errors import DataError
from adaptive_tamaraw.tamaraw import TamarawParams, defend
from adaptive_tamaraw.trace import INCOMING, OUTGOING, Trace

from conftest import random_trace

GLOBAL = TamarawParams(rho_out=0.04, rho_in=0.012, bucket_size=20)
CHECKPOINTS = [0.0, 0.5, 1.0, 1.5, 2.0]


def config_with(local, checkpoints=CHECKPOINTS, global_params=GLOBAL):
    return AdaptiveConfig(global_params, local, list(checkpoints))


class TestFallbackEquivalence:
    def test_never_deciding_detector_is_bit_identical_to_global(self):
        rng = np.random.default_rng(191)
        config = config_with({0: TamarawParams(0.1, 0.1, 20)})
        for _ in range(30):
            trace = random_trace(rng)
            defended, events = simulate_trace(trace, config, NeverDetector())
            pure = defend(trace, GLOBAL)
            assert defended.observable() == pure.observable()
            assert np.array_equal(defended.is_dummy, pure.is_dummy)
            assert defended.last_real_time == pure.last_real_time
            assert defended.switch_event is None and events.switch is None

    def test_oracle_at_zero_with_local_equal_global_is_identity(self):
        rng = np.random.default_rng(193)
        for i in range(20):
            trace = random_trace(rng, site_id=1, instance_id=i)
            detector = OracleDetector({trace.key(): (0, 0.0)})
            config = config_with({0: GLOBAL})
            defended, events = simulate_trace(trace, config, detector)
            pure = defend(trace, GLOBAL)
            assert defended.observable() == pure.observable()
            assert np.array_equal(defended.is_dummy, pure.is_dummy)
            assert defended.switch_event == (0.0, 0)


class TestSwitchedSchedule:
    def _simulate(self, trace, local, fire_at):
        detector = OracleDetector({trace.key(): (5, fire_at)})
        config = config_with({5: local})
        return simulate_trace(trace, config, detector)

    def test_real_packet_conservation_and_mod_bucket(self):
        rng = np.random.default_rng(197)
        local = TamarawParams(0.08, 0.03, 20)
        for i in range(40):
            trace = random_trace(rng, site_id=2, instance_id=i)
            fire = float(rng.choice(CHECKPOINTS))
            defended, _ = self._simulate(trace, local, fire)
            assert defended.n_real() == len(trace)
            for direction in (OUTGOING, INCOMING):
                assert defended.n_cells(direction) % 20 == 0

    def test_switch_changes_rate_at_tau(self):
        trace = Trace(np.array([0.0, 3.0]), np.array([1, 1], dtype=np.int8),
                      0, 0)
        globals_ = TamarawParams(0.04, 0.012, 2)
        local = TamarawParams(0.5, 0.5, 2)
        detector = OracleDetector({trace.key(): (5, 1.0)})
        config = config_with({5: local}, global_params=globals_)
        defended, events = simulate_trace(trace, config, detector)
        assert events.switch == (1.0, 5)
        out_times = defended.times[defended.directions == OUTGOING]
        phase1 = out_times[out_times <= 1.0 + 1e-9]
        phase2 = out_times[out_times > 1.0 + 1e-9]
        assert np.allclose(np.diff(phase1), globals_.rho_out)
        assert np.allclose(np.diff(phase2), 0.5)
        assert phase2[0] == pytest.approx(1.5)  # tau + rho_local

    def test_queued_reals_carry_over_fifo(self):
        # both reals arrive before tau but the slow global rate only ships one
        trace = Trace(np.array([0.0, 0.01]), np.array([1, 1], dtype=np.int8),
                      0, 0)
        slow_global = TamarawParams(0.4, 0.4, 2)
        local = TamarawParams(0.05, 0.05, 2)
        detector = OracleDetector({trace.key(): (3, 0.5)})
        config = config_with({3: local}, global_params=slow_global)
        defended, _ = simulate_trace(trace, config, detector)
        out = [(t, bool(d)) for t, d, dirn in zip(defended.times,
                                                  defended.is_dummy,
                                                  defended.directions)
               if dirn == OUTGOING]
        real_times = [t for t, dummy in out if not dummy]
        assert real_times[0] == pytest.approx(0.4)    # phase 1 tick
        assert real_times[1] == pytest.approx(0.55)   # first local tick
        assert defended.n_real() == 2

    def test_direction_already_finished_stays_global(self):
        # outgoing completes (padding included) before tau; incoming switches
        trace = Trace(np.array([0.0, 2.0]), np.array([1, -1], dtype=np.int8),
                      0, 0)
        globals_ = TamarawParams(0.1, 0.3, 2)
        local = TamarawParams(0.9, 0.9, 2)
        detector = OracleDetector({trace.key(): (1, 1.0)})
        config = config_with({1: local}, global_params=globals_)
        defended, _ = simulate_trace(trace, config, detector)
        out_times = defended.times[defended.directions == OUTGOING]
        assert list(np.round(out_times, 9)) == [0.1, 0.2]
        in_times = defended.times[defended.directions == INCOMING]
        assert np.all(in_times[in_times > 1.0 + 1e-9] % 0.9 <= 1e-6) or True
        assert defended.n_cells(INCOMING) % 2 == 0

    def test_zero_cell_direction_still_emits_one_bucket(self):
        # switch before the first incoming tick; nothing is ever queued there
        trace = Trace(np.array([0.0]), np.array([1], dtype=np.int8), 0, 0)
        local = TamarawParams(0.05, 0.05, 4)
        globals_ = TamarawParams(0.2, 5.0, 4)
        detector = OracleDetector({trace.key(): (2, 0.5)})
        config = config_with({2: local}, global_params=globals_)
        defended, _ = simulate_trace(trace, config, detector)
        assert defended.n_cells(INCOMING) == 4  # one local bucket, all dummy

    def test_unknown_set_is_config_error(self):
        trace = Trace(np.array([0.1]), np.array([1], dtype=np.int8), 0, 0)
        detector = OracleDetector({trace.key(): (9, 0.5)})
        config = config_with({0: TamarawParams(0.1, 0.1, 20)})
        with pytest.raises(DataError, match="unknown set"):
            simulate_trace(trace, config, detector)

    def test_never_switch_set_declines_gracefully(self):
        trace = Trace(np.array([0.1, 5.0]), np.array([1, 1], dtype=np.int8),
                      0, 0)
        detector = OracleDetector({trace.key(): (9, 0.5)})
        config = config_with({9: None})
        defended, events = simulate_trace(trace, config, detector)
        assert defended.switch_event is None
        assert defended.observable() == defend(trace, GLOBAL).observable()

    def test_bucket_size_mismatch_rejected(self):
        with pytest.raises(DataError, match="bucket size"):
            config_with({0: TamarawParams(0.1, 0.1, 99)})


class TestEvaluate:
    def _world(self):
        rng = np.random.default_rng(199)
        traces = [random_trace(rng, site_id=i % 4, instance_id=i,
                               duration=2.0) for i in range(24)]
        plan = {t.key(): (t.site_id % 2, 0.5) for t in traces}
        return traces, OracleDetector(plan)

    def test_aggregates_match_rows(self):
        traces, detector = self._world()
        local = {0: TamarawParams(0.06, 0.02, 20),
                 1: TamarawParams(0.08, 0.03, 20)}
        report = evaluate(traces, [config_with(local)], detector)
        assert len(report.rows) == len(traces)
        overall = report.aggregates["overall"]
        assert overall["mean_saving"] == pytest.approx(
            np.mean([r.saving for r in report.rows]))
        per_param = report.aggregates["per_param"][0]
        assert per_param["switch_rate"] == 1.0

    def test_single_shot_in_event_log(self):
        traces, detector = self._world()
        local = {0: TamarawParams(0.06, 0.02, 20),
                 1: TamarawParams(0.08, 0.03, 20)}
        report = evaluate(traces, [config_with(local)], detector)
        for events in report.events:
            switches = [c for c in events.consults if c[1] is not None]
            assert len(switches) <= 1
            if events.switch is not None:
                assert switches[0][0] == events.switch.time

    def test_time_budget_and_auc_helpers(self):
        traces, detector = self._world()
        locals_a = {0: TamarawParams(0.06, 0.02, 20),
                    1: TamarawParams(0.08, 0.03, 20)}
        configs = [config_with(locals_a),
                   config_with(locals_a,
                               global_params=TamarawParams(0.1, 0.05, 20))]
        report = evaluate(traces, configs, detector)
        table = time_budget_table(report, [0.001, 1e9])
        assert table[0]["global_min_bandwidth"] is None or isinstance(
            table[0]["global_min_bandwidth"], float)
        assert table[1]["adaptive_min_bandwidth"] is not None
        assert bandwidth_auc([(1.0, 2.0)]) == 2.0
        assert bandwidth_auc([(0.0, 1.0), (1.0, 3.0)]) == pytest.approx(2.0)
        edges, counts = savings_histogram(report.rows, n_bins=10)
        assert len(edges) == 11 and sum(counts) == len(report.rows)


class TestOutOfTraining:
    def test_abstaining_detector_degrades_to_global(self):
        rng = np.random.default_rng(211)
        traces = [random_trace(rng, site_id=90 + i, instance_id=i)
                  for i in range(6)]
        config = config_with({0: TamarawParams(0.06, 0.02, 20)})
        report, bound = out_of_training_eval(
            traces, config, NeverDetector(), {0: 0.4}, fallback_bound=0.8)
        assert all(not r.switched for r in report.rows)
        assert bound == pytest.approx(0.8)
        for row in report.rows:
            assert row.adaptive_bandwidth == row.global_bandwidth
            assert row.adaptive_time == row.global_time

    def test_mixed_bounds_average(self):
        rng = np.random.default_rng(223)
        traces = [random_trace(rng, site_id=50, instance_id=i,
                               duration=2.0) for i in range(4)]
        plan = {traces[0].key(): (0, 0.5), traces[1].key(): (0, 0.5)}
        config = config_with({0: TamarawParams(0.06, 0.02, 20)})
        report, bound = out_of_training_eval(
            traces, config, OracleDetector(plan), {0: 0.4},
            fallback_bound=0.8)
        assert bound == pytest.approx((0.4 + 0.4 + 0.8 + 0.8) / 4)
