"""Four-beat binary onset matrices and the pitch/time mapping rules."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

LOW_MIDI = 36
HIGH_MIDI = 95
N_PITCHES = HIGH_MIDI - LOW_MIDI + 1  # 60
TICKS_PER_BEAT = 24
BEATS_PER_UNIT = 4
TICKS_PER_UNIT = TICKS_PER_BEAT * BEATS_PER_UNIT  # 96
UNIT_SHAPE = (N_PITCHES, TICKS_PER_UNIT)
UNIT_SIZE = N_PITCHES * TICKS_PER_UNIT  # 5760
TRANSPOSITIONS = tuple(range(-5, 7))


@dataclass(frozen=True)
class PitchRange:
    low_midi: int = LOW_MIDI
    high_midi: int = HIGH_MIDI

    @property
    def count(self) -> int:
        return self.high_midi - self.low_midi + 1


@dataclass(frozen=True)
class TimeGrid:
    ticks_per_beat: int = TICKS_PER_BEAT
    beats_per_unit: int = BEATS_PER_UNIT

    @property
    def ticks_per_unit(self) -> int:
        return self.ticks_per_beat * self.beats_per_unit


def fold_pitch(midi_pitch: int) -> int:
    """Row index (0..59) of a MIDI pitch, shifting out-of-range notes by octaves."""
    if not 0 <= midi_pitch <= 127:
        raise ValueError(f"MIDI pitch out of range: {midi_pitch}")
    p = midi_pitch
    while p < LOW_MIDI:
        p += 12
    while p > HIGH_MIDI:
        p -= 12
    return p - LOW_MIDI


def quantize_tick(event_ticks: int, source_division: int) -> int:
    """Resample a tick position from ``source_division`` PPQ onto the 24-PPQ grid.

    Exact rational arithmetic, rounding half away from zero.
    """
    if source_division < 1:
        raise ValueError("source_division must be >= 1")
    q = Decimal(event_ticks * TICKS_PER_BEAT) / Decimal(source_division)
    return int(q.quantize(Decimal(1), rounding=ROUND_HALF_UP))


class PianoRollUnit:
    """Immutable 60x96 onset matrix, stored as sorted (pitch_row, tick) pairs."""

    __slots__ = ("_onsets", "_key")

    def __init__(self, onsets=()):
        pairs = set()
        for r, t in onsets:
            r, t = int(r), int(t)
            if not (0 <= r < N_PITCHES and 0 <= t < TICKS_PER_UNIT):
                raise ValueError(f"onset ({r}, {t}) outside the 60x96 grid")
            pairs.add((r, t))
        object.__setattr__(self, "_onsets", tuple(sorted(pairs)))
        object.__setattr__(self, "_key", None)

    def __setattr__(self, name, value):
        raise AttributeError("PianoRollUnit is immutable")

    @classmethod
    def from_dense(cls, matrix) -> "PianoRollUnit":
        m = np.asarray(matrix)
        if m.shape != UNIT_SHAPE:
            raise ValueError(f"expected shape {UNIT_SHAPE}, got {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("onset matrix must be binary")
        rows, ticks = np.nonzero(m)
        return cls(zip(rows.tolist(), ticks.tolist()))

    @property
    def onsets(self) -> tuple[tuple[int, int], ...]:
        return self._onsets

    def __len__(self) -> int:
        return len(self._onsets)

    def dense(self) -> np.ndarray:
        m = np.zeros(UNIT_SHAPE, dtype=np.uint8)
        if self._onsets:
            r, t = zip(*self._onsets)
            m[list(r), list(t)] = 1
        return m

    def key(self) -> bytes:
        """Canonical byte encoding of the sorted onset list."""
        if self._key is None:
            object.__setattr__(self, "_key", bytes(v for pair in self._onsets for v in pair))
        return self._key

    def __eq__(self, other):
        if not isinstance(other, PianoRollUnit):
            return NotImplemented
        return self._onsets == other._onsets

    def __hash__(self):
        return hash(self._onsets)

    def __repr__(self):
        return f"PianoRollUnit({len(self._onsets)} onsets)"


def flatten(unit: PianoRollUnit) -> np.ndarray:
    """Row-major 5760-vector: index 96*row + tick."""
    v = np.zeros(UNIT_SIZE, dtype=np.float64)
    for r, t in unit.onsets:
        v[TICKS_PER_UNIT * r + t] = 1.0
    return v


def transpose_unit(unit: PianoRollUnit, semitones: int) -> PianoRollUnit:
    """Shift every onset by ``semitones`` and re-fold into range; collisions merge."""
    if semitones not in TRANSPOSITIONS:
        raise ValueError(f"transposition must be in [-5, 6], got {semitones}")
    if semitones == 0:
        return unit
    return PianoRollUnit((fold_pitch(r + LOW_MIDI + semitones), t) for r, t in unit.onsets)


def stack_units(units) -> np.ndarray:
    """Dense float batch of shape (N, 1, 60, 96)."""
    units = list(units)
    x = np.zeros((len(units), 1) + UNIT_SHAPE, dtype=np.float64)
    for i, u in enumerate(units):
        if len(u):
            r, t = zip(*u.onsets)
            x[i, 0, list(r), list(t)] = 1.0
    return x
