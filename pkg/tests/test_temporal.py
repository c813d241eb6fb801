import threading
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from chronoflow.temporal import (
    INT64_MAX,
    INT64_MIN,
    MAX_SPEED,
    Clock,
    ClockMode,
    Envelope,
    EnvelopeViolation,
    LogicalClock,
    ManualClock,
    PacedClock,
    ReplayDescriptor,
    TimeOverflow,
    UnsupportedMode,
    ViolationKind,
    add,
    as_speed,
    check_envelope,
    format_timestamp,
    parse_duration,
    parse_timestamp,
    require_span,
    sub,
    validate_envelope,
    virtual_now,
)

S = 1_000_000_000


def vclock(origin, wall_origin, speed):
    return Clock(ClockMode.VIRTUAL, origin, wall_origin, speed)


class TestVirtualNow:
    def test_identity_pacing(self):
        T = 1_700_000_000 * S
        assert virtual_now(vclock(T, T, 1), T + 5 * S) == T + 5 * S

    def test_double_speed(self):
        assert virtual_now(vclock(0, 0, 2), 5_000_000_000) == 10_000_000_000

    def test_half_speed_truncates(self):
        assert virtual_now(vclock(100, 0, Fraction(1, 2)), 5) == 102

    def test_real_mode_rejected(self):
        with pytest.raises(UnsupportedMode):
            virtual_now(Clock(), 10)

    def test_max_speed_has_no_mapping(self):
        with pytest.raises(UnsupportedMode):
            virtual_now(vclock(0, 0, MAX_SPEED), 10)

    def test_overflow(self):
        with pytest.raises(TimeOverflow):
            virtual_now(vclock(INT64_MAX - 10, 0, 1), 11)

    def test_zero_speed_invalid(self):
        with pytest.raises(ValueError):
            vclock(0, 0, 0)

    @given(
        st.integers(-(10**12), 10**12),
        st.integers(1, 1000),
        st.integers(1, 1000),
        st.integers(0, 10**12),
        st.integers(0, 10**12),
    )
    def test_matches_oracle_and_rounding(self, origin, num, den, w1, w2):
        speed = Fraction(num, den)
        w1, w2 = sorted((w1, w2))
        c = vclock(origin, 0, speed)
        v1, v2 = virtual_now(c, w1), virtual_now(c, w2)
        assert v1 == oracles.virtual_now(origin, 0, speed, w1)
        assert v2 == oracles.virtual_now(origin, 0, speed, w2)
        exact = speed * (w2 - w1)
        assert abs((v2 - v1) - exact) < 1


class TestValidateEnvelope:
    def test_first_message(self):
        assert validate_envelope(None, Envelope(0, 0, 10, 10)) is None

    def test_equal_originating_rejected(self):
        v = validate_envelope(Envelope(0, 4, 100, 100), Envelope(0, 5, 100, 101))
        assert v.kind is ViolationKind.NON_MONOTONE_ORIGINATING

    def test_gap(self):
        v = validate_envelope(Envelope(0, 4, 100, 100), Envelope(0, 6, 200, 200))
        assert v.kind is ViolationKind.SEQUENCE_GAP

    def test_creation_before_originating(self):
        v = validate_envelope(None, Envelope(0, 0, 10, 9))
        assert v.kind is ViolationKind.CREATION_BEFORE_ORIGINATING

    def test_first_must_be_zero(self):
        assert validate_envelope(None, Envelope(0, 1, 10, 10)).kind is ViolationKind.SEQUENCE_GAP

    def test_check_raises(self):
        with pytest.raises(EnvelopeViolation) as info:
            check_envelope(None, Envelope(0, 0, 5, 4))
        assert info.value.violation.kind is ViolationKind.CREATION_BEFORE_ORIGINATING

    @given(
        st.lists(
            st.tuples(st.integers(-1, 2), st.integers(-2, 5), st.integers(-1, 3)),
            max_size=12,
        )
    )
    def test_oracle_equivalence(self, steps):
        # mostly-valid random sequences: perturb sequence, originating and creation deltas
        envs, seq, t = [], 0, 0
        for dseq, dt, dc in steps:
            seq_i = seq + (dseq if dseq != 2 else 0)
            t += dt
            envs.append(Envelope(0, max(seq_i, 0), t, t + dc))
            seq += 1
        accepted = all(validate_envelope(a, b) is None for a, b in zip([None, *envs], envs))
        assert accepted == oracles.envelopes_ok(envs)


class TestArithmetic:
    def test_add_overflow(self):
        with pytest.raises(TimeOverflow):
            add(INT64_MAX, 1)
        with pytest.raises(TimeOverflow):
            sub(INT64_MIN, 1)
        assert add(INT64_MAX - 1, 1) == INT64_MAX

    def test_negative_span_rejected(self):
        with pytest.raises(ValueError):
            require_span(-1)

    @pytest.mark.parametrize(
        "text,ns", [("250ms", 250_000_000), ("1.5s", 1_500_000_000), ("40us", 40_000), ("7", 7), ("3ns", 3)]
    )
    def test_parse_duration(self, text, ns):
        assert parse_duration(text) == ns

    def test_format_timestamp(self):
        assert format_timestamp(10) == "1970-01-01T00:00:00.000000010Z"
        assert format_timestamp(None) == "-"

    @given(st.integers(-(2**40) * S // 2**10, 2**40 * S // 2**10))
    def test_timestamp_text_round_trip(self, ns):
        assert parse_timestamp(format_timestamp(ns)) == ns
        assert parse_timestamp(str(ns)) == ns

    def test_parse_timestamp_with_offset(self):
        assert parse_timestamp("1970-01-01T01:00:00+01:00") == 0


class TestReplayDescriptor:
    def test_bounds(self):
        with pytest.raises(ValueError):
            ReplayDescriptor(10, 10)
        d = ReplayDescriptor(10, 20, 2)
        assert d.contains(10) and d.contains(20) and not d.contains(21)
        assert d.speed == 2

    def test_speed_parsing(self):
        assert as_speed("max") is MAX_SPEED
        assert as_speed("0.5") == Fraction(1, 2)
        with pytest.raises(ValueError):
            as_speed(0)


class TestRuntimeClocks:
    def test_logical_clock_tracks_frontier(self):
        c = LogicalClock(5)
        assert c.now() == 5
        assert c.stamp(3) == 5
        assert c.stamp(9) == 9
        c.observe(7)
        assert c.now() == 9

    def test_paced_clock_never_stamps_before_originating(self):
        c = PacedClock(0, 1)
        assert c.stamp(10**18) == 10**18

    def test_manual_clock(self):
        c = ManualClock(10)
        c.advance(5)
        assert c.now() == 15 and c.stamp(12) == 15 and c.stamp(20) == 20
        with pytest.raises(ValueError):
            c.set(1)

    def test_paced_wait_respects_stop(self):
        c = PacedClock(0, 1)
        stop = threading.Event()
        stop.set()
        c.wait_until(10**18, stop)  # returns immediately
