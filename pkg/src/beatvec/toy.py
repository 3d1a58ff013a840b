"""Synthetic multi-composer corpus for smoke tests and the acceptance suite.

Each pseudo-composer owns one of the three diminished-seventh collections
(disjoint pitch-class sets that are transpositions of each other) and a
small vocabulary of one-beat rhythms chained by a Markov matrix. Once the
corpus is augmented to all twelve keys, pitch content alone no longer tells
composers apart; rhythm habits and register do. A song walks a
slow harmony (one chord per two units) through the composer's pitch
classes. The texture is homorhythmic: on every rhythm tick the left hand
sounds the chord root in the lower two octaves and the right hand a chord
tone in the composer's register.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dataset import Dataset, build_dataset
from .midi import SongEvents, write_smf
from .pianoroll import LOW_MIDI, TICKS_PER_BEAT

PITCH_CLASSES = ((0, 3, 6, 9), (1, 4, 7, 10), (2, 5, 8, 11))

RHYTHMS = (
    (0,),
    (0, 12),
    (0, 6, 12, 18),
    (0, 8, 16),
    (0, 12, 18),
    (0, 6, 12),
    (6, 18),
    (0, 18),
)

# rhythm indices each composer uses
COMPOSER_RHYTHMS = ((0, 1, 2, 4), (1, 3, 5, 7), (0, 2, 6, 3))

MIDI_DIVISION = 480


def _markov(rng: np.random.Generator, k: int, stay: float = 0.7) -> np.ndarray:
    """Row-stochastic matrix with one preferred successor per state."""
    succ = rng.permutation(k)
    m = np.full((k, k), (1.0 - stay) / (k - 1))
    m[np.arange(k), succ] = stay
    return m


def make_song(rng, composer: int, n_beats: int, style) -> list[tuple[int, int]]:
    """Onsets as (grid_tick, midi_pitch)."""
    pcs = PITCH_CLASSES[composer]
    rhythms = COMPOSER_RHYTHMS[composer]
    rhythm_m = style["rhythm"]
    register = style["register"]
    chord = int(rng.integers(4))
    state = int(rng.integers(len(rhythms)))
    notes = []
    for beat in range(n_beats):
        if beat % 8 == 0 and beat:
            step = rng.choice([1, -1, 0], p=[0.6, 0.2, 0.2])
            chord = (chord + step) % 4
        base = beat * TICKS_PER_BEAT
        root = pcs[chord]
        for j, off in enumerate(RHYTHMS[rhythms[state]]):
            # homorhythmic texture: left hand doubles the rhythm on the root
            notes.append((base + off, LOW_MIDI + 12 + root))
            notes.append((base + off, register + pcs[(chord + 2 * (j % 2)) % 4]))
        state = int(rng.choice(len(rhythms), p=rhythm_m[state]))
    return notes


def toy_songs(
    seed: int = 0,
    n_composers: int = 3,
    songs_per_composer: int = 6,
    test_songs: int = 2,
    units_per_song: int = 10,
) -> tuple[list[tuple[SongEvents, str]], list[str], dict]:
    """``((song, split) pairs, composer names, raw note lists by song id)``."""
    if not 2 <= n_composers <= len(PITCH_CLASSES):
        raise ValueError(f"toy corpus supports 2..{len(PITCH_CLASSES)} composers")
    rng = np.random.default_rng([seed, 101])
    styles = [{"rhythm": _markov(rng, 4), "register": 60 + 12 * (c % 2)} for c in range(n_composers)]
    names = [f"composer{c}" for c in range(n_composers)]
    songs, raw = [], {}
    for c in range(n_composers):
        for s in range(songs_per_composer):
            song_id = f"{names[c]}/song{s:02d}.mid"
            notes = make_song(rng, c, 4 * units_per_song, styles[c])
            raw[song_id] = notes
            grid = sorted({(t, p - LOW_MIDI) for t, p in notes})
            split = "test" if s >= songs_per_composer - test_songs else "train"
            ev = SongEvents(song_id, c, tuple(grid), 4 * units_per_song)
            songs.append((ev, split))
    return songs, names, raw


def toy_dataset(seed: int = 0, augment_keys: bool = True, **kw) -> Dataset:
    """Build the toy corpus in memory; the defaults give 2160 units."""
    songs, names, _ = toy_songs(seed, **kw)
    return build_dataset(songs, names, augment_keys=augment_keys, config={"toy_seed": seed, **kw})


def write_toy_midi(out_dir, seed: int = 0, **kw) -> Path:
    """Write the toy corpus as .mid files plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    songs, names, raw = toy_songs(seed, **kw)
    rows = []
    scale = MIDI_DIVISION // TICKS_PER_BEAT
    for ev, split in songs:
        path = out_dir / ev.song_id
        path.parent.mkdir(parents=True, exist_ok=True)
        notes = [(t * scale, p) for t, p in raw[ev.song_id]]
        path.write_bytes(write_smf(notes, division=MIDI_DIVISION, duration=scale * 6))
        rows.append({"path": ev.song_id, "composer_name": names[ev.composer_id], "split": split})
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["path", "composer_name", "split"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return manifest
