import numpy as np
import pytest

from adaptive_tamaraw.errors import TraceFormatError
from adaptive_tamaraw.trace import (Trace, compute_tam, parse_trace,
                                    serialize_trace, truncate_prefix)

from conftest import random_trace


class TestParseTrace:
    def test_two_packets(self):
        trace = parse_trace("0.0\t1\n0.12\t-1\n", 3, 7)
        assert trace.packets == [(0.0, 1), (0.12, -1)]
        assert trace.site_id == 3 and trace.instance_id == 7

    def test_leading_plus_accepted(self):
        trace = parse_trace("0.0\t+1\n")
        assert trace.directions[0] == 1

    def test_out_of_order_rejected_with_line_number(self):
        with pytest.raises(TraceFormatError) as err:
            parse_trace("0.5\t-1\n0.1\t1\n")
        assert err.value.line_number == 2
        assert "out-of-order" in str(err.value)

    def test_out_of_order_within_tolerance_ok(self):
        trace = parse_trace("0.5\t-1\n0.4999999999\t1\n")
        assert len(trace) == 2

    def test_three_line_fixture(self):
        # independent check: split the fixture by hand and count
        fixture = "0.05\t1\n0.2\t-1\n0.31\t1\n"
        lines = [ln for ln in fixture.splitlines() if ln]
        assert len(lines) == 3
        assert float(lines[-1].split("\t")[0]) == 0.31
        trace = parse_trace(fixture)
        assert len(trace) == 3
        assert trace.duration == 0.31

    def test_empty_file(self):
        with pytest.raises(TraceFormatError, match="empty"):
            parse_trace("\n\n")

    def test_malformed_line_number_reported(self):
        with pytest.raises(TraceFormatError) as err:
            parse_trace("0.0\t1\nnot-a-line\n")
        assert err.value.line_number == 2

    def test_direction_outside_pm1(self):
        with pytest.raises(TraceFormatError, match="direction"):
            parse_trace("0.0\t2\n")
        with pytest.raises(TraceFormatError):
            parse_trace("0.0\t1.0\n")

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            trace = random_trace(rng, site_id=4, instance_id=9)
            again = parse_trace(serialize_trace(trace), 4, 9)
            assert again == trace


class TestComputeTAM:
    def test_single_packet(self):
        trace = Trace(np.array([0.0]), np.array([1], dtype=np.int8))
        tam = compute_tam(trace, 0.08, 1000)
        assert tam.out_counts[0] == 1
        assert tam.out_counts.sum() == 1 and tam.in_counts.sum() == 0

    def test_three_packet_example(self):
        trace = Trace(np.array([0.00, 0.05, 0.09]),
                      np.array([1, -1, -1], dtype=np.int8))
        tam = compute_tam(trace, 0.08, 1000)
        # brute-force slot assignment by direct division
        for t, d in trace.packets:
            slot = int(t // 0.08)
            row = tam.out_counts if d > 0 else tam.in_counts
            assert row[slot] >= 1
        assert tam.out_counts[0] == 1
        assert tam.in_counts[0] == 1 and tam.in_counts[1] == 1
        assert tam.total() == 3

    def test_default_slot_width_is_80ms(self):
        from adaptive_tamaraw.trace import DEFAULT_SLOT_WIDTH, DEFAULT_N_SLOTS
        assert DEFAULT_SLOT_WIDTH == 0.080
        assert DEFAULT_N_SLOTS == 1000

    def test_boundary_goes_to_later_slot(self):
        trace = Trace(np.array([0.08]), np.array([1], dtype=np.int8))
        tam = compute_tam(trace, 0.08, 10)
        assert tam.out_counts[1] == 1 and tam.out_counts[0] == 0

    def test_overflow_packets_dropped(self):
        trace = Trace(np.array([0.0, 5.0]), np.array([1, 1], dtype=np.int8))
        tam = compute_tam(trace, 0.08, 10)
        assert tam.total() == 1

    def test_totals_match_window_population(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            trace = random_trace(rng, duration=3.0)
            n_slots = int(rng.integers(1, 40))
            width = float(rng.uniform(0.01, 0.2))
            tam = compute_tam(trace, width, n_slots)
            in_window = int((trace.times < n_slots * width).sum())
            assert tam.total() == in_window

    def test_empty_trace_rejected(self):
        empty = Trace(np.array([]), np.array([], dtype=np.int8))
        with pytest.raises(ValueError):
            compute_tam(empty)


class TestTruncatePrefix:
    def test_horizon_zero_keeps_time_zero(self):
        trace = Trace(np.array([0.0, 0.1, 0.2]),
                      np.array([1, -1, 1], dtype=np.int8))
        assert len(truncate_prefix(trace, 0.0)) == 1

    def test_horizon_past_end_is_identity(self):
        trace = Trace(np.array([0.1, 0.2]), np.array([1, -1], dtype=np.int8))
        assert truncate_prefix(trace, 5.0) == trace

    def test_filter_example(self):
        trace = Trace(np.array([0.1, 0.2, 0.3]),
                      np.array([1, -1, 1], dtype=np.int8))
        prefix = truncate_prefix(trace, 0.2)
        # filter oracle
        expected = [(t, d) for t, d in trace.packets if t <= 0.2]
        assert prefix.packets == expected

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            trace = random_trace(rng)
            h = float(rng.uniform(0, trace.duration))
            once = truncate_prefix(trace, h)
            assert truncate_prefix(once, h) == once

    def test_labels_preserved(self):
        trace = Trace(np.array([0.1]), np.array([1], dtype=np.int8), 5, 6)
        prefix = truncate_prefix(trace, 0.05)
        assert prefix.site_id == 5 and prefix.instance_id == 6
        assert len(prefix) == 0


class TestTraceInvariants:
    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            Trace(np.array([-0.1]), np.array([1], dtype=np.int8))

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            Trace(np.array([0.2, 0.1]), np.array([1, 1], dtype=np.int8))

    def test_bad_direction_rejected(self):
        with pytest.raises(ValueError):
            Trace(np.array([0.1]), np.array([2], dtype=np.int8))

    def test_immutable(self):
        trace = Trace(np.array([0.1]), np.array([1], dtype=np.int8))
        with pytest.raises(ValueError):
            trace.times[0] = 9.0
