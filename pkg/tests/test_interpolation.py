import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from chronoflow.interpolation import (
    INSUFFICIENT,
    NO_MATCH,
    Exact,
    JoinState,
    LastBefore,
    Match,
    Nearest,
    interpolate,
    parse_interpolator,
    prune,
)


def state(times, max_seen=None, closed=False):
    return JoinState.from_times(times, max_seen=max_seen, closed=closed)


def outcome(d):
    """Comparable form: matched time, or the sentinel."""
    return d.envelope.originating if isinstance(d, Match) else d


# -- stated examples ------------------------------------------------------------


def test_exact_match():
    assert outcome(interpolate(state([10, 20]), 10, Exact())) == 10


def test_exact_waits_for_time():
    assert interpolate(state([5]), 10, Exact()) is INSUFFICIENT
    assert interpolate(state([5, 12]), 10, Exact()) is NO_MATCH


def test_nearest_final_match():
    assert outcome(interpolate(state([8, 14]), 10, Nearest(5))) == 8


def test_nearest_insufficient():
    assert interpolate(state([8]), 10, Nearest(5)) is INSUFFICIENT


def test_nearest_insufficient_has_adversarial_continuation():
    # enumerate single-message continuations: some make 8 no longer nearest
    base = oracles.pick([(8, 8)], 10, Nearest(5))
    changed = [ts for ts in range(9, 20) if oracles.pick([(8, 8), (ts, ts)], 10, Nearest(5)) != base]
    assert 11 in changed


def test_last_before():
    assert outcome(interpolate(state([8, 14]), 10, LastBefore())) == 8


def test_nearest_final_no_match():
    assert interpolate(state([8], max_seen=12), 10, Nearest(1)) is NO_MATCH


def test_nearest_tie_goes_to_earlier():
    assert outcome(interpolate(state([8, 12]), 10, Nearest(5))) == 8


def test_closed_is_always_final():
    assert interpolate(state([], closed=True), 10, Exact()) is NO_MATCH
    assert outcome(interpolate(state([3], closed=True), 10, LastBefore())) == 3
    assert outcome(interpolate(state([9], closed=True), 10, Nearest(1))) == 9


def test_parse():
    assert parse_interpolator("exact") == Exact()
    assert parse_interpolator("last-before") == LastBefore()
    assert parse_interpolator("nearest(5ms)") == Nearest(5_000_000)
    with pytest.raises(ValueError):
        parse_interpolator("closest")
    with pytest.raises(ValueError):
        Nearest(-1)


# -- properties ------------------------------------------------------------------

interpolators = st.one_of(
    st.just(Exact()), st.just(LastBefore()), st.integers(0, 6).map(Nearest)
)


@st.composite
def instances(draw):
    gaps = draw(st.lists(st.integers(1, 5), max_size=8))
    start = draw(st.integers(0, 5))
    times, t = [], start
    for g in gaps:
        times.append(t)
        t += g
    extra = draw(st.integers(0, 4))
    max_seen = (times[-1] + extra) if times else (draw(st.integers(0, 20)) if draw(st.booleans()) else None)
    closed = draw(st.booleans())
    q = draw(st.integers(-2, 40))
    return times, max_seen, closed, q, draw(interpolators)


@given(instances(), st.randoms(use_true_random=False))
def test_certainty_soundness(inst, rnd):
    times, max_seen, closed, q, ip = inst
    d = interpolate(state(times, max_seen, closed), q, ip)
    if d is INSUFFICIENT or closed:
        return
    for _ in range(25):
        cont, t = [], (max_seen if max_seen is not None else -5)
        for _ in range(rnd.randint(0, 6)):
            t += rnd.randint(1, 6)
            cont.append(t)
        extended = state(times + cont, closed=True)
        assert outcome(interpolate(extended, q, ip)) == outcome(d)


@given(instances())
def test_final_decision_matches_oracle(inst):
    times, max_seen, closed, q, ip = inst
    d = interpolate(state(times, max_seen, closed), q, ip)
    if d is INSUFFICIENT:
        assert not closed
        return
    i = oracles.pick([(t, t) for t in times], q, ip)
    assert outcome(d) == (NO_MATCH if i is None else times[i])


@given(instances(), st.integers(0, 40))
def test_prune_keeps_later_queries_intact(inst, later):
    times, max_seen, _, q, ip = inst
    q2 = q + later
    full = state(times, max_seen, closed=True)
    pruned = state(times, max_seen, closed=True)
    prune(pruned, q, ip)
    assert outcome(interpolate(pruned, q2, ip)) == outcome(interpolate(full, q2, ip))


def test_soundness_randomized_many():
    # the same property on a wider, seeded space
    rng = random.Random(7)
    finals = 0
    for _ in range(3000):
        n = rng.randint(0, 10)
        times = sorted(rng.sample(range(60), n))
        max_seen = (times[-1] if times else 0) + rng.randint(0, 5)
        ip = rng.choice([Exact(), LastBefore(), Nearest(rng.randint(0, 8))])
        q = rng.randint(-3, 70)
        d = interpolate(state(times, max_seen), q, ip)
        if d is INSUFFICIENT:
            continue
        finals += 1
        for _ in range(20):
            cont = sorted(rng.sample(range(max_seen + 1, max_seen + 40), rng.randint(0, 5)))
            assert outcome(interpolate(state(times + cont, closed=True), q, ip)) == outcome(d)
    assert finals > 500
