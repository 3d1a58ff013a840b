import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beatvec.pianoroll import (
    HIGH_MIDI,
    LOW_MIDI,
    N_PITCHES,
    TICKS_PER_UNIT,
    TRANSPOSITIONS,
    UNIT_SHAPE,
    UNIT_SIZE,
    PianoRollUnit,
    PitchRange,
    TimeGrid,
    flatten,
    fold_pitch,
    quantize_tick,
    stack_units,
    transpose_unit,
)

onsets = st.sets(st.tuples(st.integers(0, N_PITCHES - 1), st.integers(0, TICKS_PER_UNIT - 1)), max_size=80)


def test_grid_constants():
    assert PitchRange().count == 60
    assert TimeGrid().ticks_per_unit == 96
    assert UNIT_SHAPE == (60, 96) and UNIT_SIZE == 5760
    assert TRANSPOSITIONS == tuple(range(-5, 7))


@pytest.mark.parametrize(
    "pitch, row",
    [(36, 0), (95, 59), (35, 11), (24, 0), (0, 0), (96, 48), (127, 55), (60, 24), (23, 11)],
)
def test_fold_pitch_known(pitch, row):
    assert fold_pitch(pitch) == row


@given(st.integers(0, 127))
def test_fold_pitch_range_and_class(p):
    r = fold_pitch(p)
    assert 0 <= r < N_PITCHES
    assert (r + LOW_MIDI) % 12 == p % 12
    # idempotent on the folded pitch
    assert fold_pitch(r + LOW_MIDI) == r
    if LOW_MIDI <= p <= HIGH_MIDI:
        assert r == p - LOW_MIDI


@pytest.mark.parametrize("p", [-1, 128, 1000])
def test_fold_pitch_rejects(p):
    with pytest.raises(ValueError):
        fold_pitch(p)


@pytest.mark.parametrize(
    "ticks, division, expected",
    [(0, 480, 0), (480, 480, 24), (9, 480, 0), (10, 480, 1), (30, 480, 2), (20, 480, 1), (1, 48, 1), (3, 48, 2), (5, 2, 60)],
)
def test_quantize_tick_half_up(ticks, division, expected):
    # 10/480*24 = 0.5 and 30/480*24 = 1.5 both round up
    assert quantize_tick(ticks, division) == expected


@given(st.integers(0, 10**7), st.integers(1, 2000))
def test_quantize_tick_matches_fraction(ticks, division):
    from fractions import Fraction

    q = Fraction(ticks * 24, division)
    expected = int(q) + (1 if q - int(q) >= Fraction(1, 2) else 0)
    assert quantize_tick(ticks, division) == expected


@given(onsets)
def test_unit_dense_round_trip(pairs):
    u = PianoRollUnit(pairs)
    m = u.dense()
    assert m.shape == UNIT_SHAPE and m.dtype == np.uint8
    assert set(np.unique(m)) <= {0, 1}
    assert int(m.sum()) == len(pairs)
    assert PianoRollUnit.from_dense(m) == u
    v = flatten(u)
    assert v.shape == (UNIT_SIZE,)
    np.testing.assert_array_equal(v, m.reshape(-1))


@given(onsets)
def test_key_is_canonical(pairs):
    a = PianoRollUnit(pairs)
    b = PianoRollUnit(reversed(sorted(pairs)))
    assert a.key() == b.key() and hash(a) == hash(b)


def test_unit_validation():
    with pytest.raises(ValueError):
        PianoRollUnit([(60, 0)])
    with pytest.raises(ValueError):
        PianoRollUnit([(0, 96)])
    with pytest.raises(ValueError):
        PianoRollUnit.from_dense(np.full(UNIT_SHAPE, 2))
    with pytest.raises(ValueError):
        PianoRollUnit.from_dense(np.zeros((60, 95)))
    u = PianoRollUnit([(1, 1)])
    with pytest.raises(AttributeError):
        u.foo = 1


@given(onsets, st.sampled_from(TRANSPOSITIONS))
def test_transpose_preserves_ticks_and_pitch_class(pairs, k):
    u = PianoRollUnit(pairs)
    t = transpose_unit(u, k)
    assert {tick for _, tick in t.onsets} == {tick for _, tick in u.onsets}
    assert len(t) <= len(u)
    expected = {(fold_pitch(r + LOW_MIDI + k), tick) for r, tick in pairs}
    assert set(t.onsets) == expected


def test_transpose_rejects_out_of_range():
    with pytest.raises(ValueError):
        transpose_unit(PianoRollUnit(), 7)


def test_stack_units_shape():
    x = stack_units([PianoRollUnit([(0, 0)]), PianoRollUnit()])
    assert x.shape == (2, 1, 60, 96)
    assert x[0, 0, 0, 0] == 1.0 and x.sum() == 1.0


def test_flatten_examples():
    assert not flatten(PianoRollUnit()).any()
    e0 = flatten(PianoRollUnit([(0, 0)]))
    assert e0[0] == 1.0 and e0.sum() == 1.0
    # row-major index 96*row + tick: (0, 95) -> 95 and (1, 2) -> 98
    v = flatten(PianoRollUnit([(1, 2), (0, 95)]))
    assert np.flatnonzero(v).tolist() == [95, 98]


def test_transpose_examples():
    u = PianoRollUnit([(3, 5), (40, 7)])
    assert transpose_unit(u, 0) == u
    assert transpose_unit(PianoRollUnit([(0, 9)]), -1) == PianoRollUnit([(11, 9)])
    assert transpose_unit(PianoRollUnit([(24, 0)]), 6) == PianoRollUnit([(30, 0)])
    assert quantize_tick(250, 480) == 13
    assert quantize_tick(0, 96) == 0
