"""Unit extraction, transposition augmentation, deduplication and the BVD1 file.

BVD1 layout (all integers little-endian)::

    b"BVD1" | version u16 | composer count u16
    composer names: (u16 byte length, UTF-8 bytes) * count
    unit count u64
    per record: song index u32 | composer id u16 | beat offset u32
                transposition i8 | onset count u16 | (pitch_row u8, tick u8) * count

The song table, split assignment, extraction stride and the resolved run
config live in a JSON sidecar next to the file (``<path>.manifest.json``).
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import DataError, MalformedFile, OutOfRange, SongTooShort
from .midi import SongEvents, read_song
from .pianoroll import (
    BEATS_PER_UNIT,
    TICKS_PER_BEAT,
    TRANSPOSITIONS,
    PianoRollUnit,
    transpose_unit,
)

log = logging.getLogger(__name__)

MAGIC = b"BVD1"
VERSION = 1
SEQUENCE_STRIDE = BEATS_PER_UNIT


@dataclass(frozen=True)
class UnitRecord:
    unit: PianoRollUnit
    song_id: str
    composer_id: int
    beat_offset: int
    transposition: int = 0


@dataclass
class SongInfo:
    song_id: str
    composer_id: int
    split: str
    total_beats: int


@dataclass
class Dataset:
    composers: list[str]
    songs: list[SongInfo]
    records: list[UnitRecord]
    stride_beats: int = SEQUENCE_STRIDE
    augmented: bool = False
    config: dict = field(default_factory=dict)

    @property
    def n_composers(self) -> int:
        return len(self.composers)

    def song_split(self) -> dict[str, str]:
        return {s.song_id: s.split for s in self.songs}

    def split_records(self, split: str | None) -> list[UnitRecord]:
        if split is None:
            return list(self.records)
        splits = self.song_split()
        return [r for r in self.records if splits[r.song_id] == split]

    def training_pool(self, split: str | None = "train") -> list[UnitRecord]:
        """Deduplicated units of a split (the autoencoder/classifier pool)."""
        return dedup(self.split_records(split))

    def sequences(self, split: str | None = None) -> list[list[UnitRecord]]:
        """Non-overlapping unit tilings, one per (song, transposition)."""
        groups = defaultdict(list)
        for r in self.split_records(split):
            if r.beat_offset % SEQUENCE_STRIDE == 0:
                groups[(r.song_id, r.transposition)].append(r)
        out = []
        for key in sorted(groups):
            seq = sorted(groups[key], key=lambda r: r.beat_offset)
            # tiles must be contiguous; stop at the first gap
            run = [seq[0]]
            for r in seq[1:]:
                if r.beat_offset != run[-1].beat_offset + SEQUENCE_STRIDE:
                    break
                run.append(r)
            out.append(run)
        return out

    def counts(self) -> dict:
        return {"total_units": len(self.records), "unique_units": len(dedup(self.records))}


# --------------------------------------------------------------------------
# unit operations
# --------------------------------------------------------------------------


def extract_units(song: SongEvents, stride_beats: int = SEQUENCE_STRIDE) -> list[UnitRecord]:
    """Four-beat windows starting every ``stride_beats`` beats."""
    if stride_beats < 1:
        raise ValueError("stride_beats must be >= 1")
    if song.total_beats < BEATS_PER_UNIT:
        raise SongTooShort(f"{song.song_id}: {song.total_beats} beats < {BEATS_PER_UNIT}")
    buckets = defaultdict(list)
    for tick, row in song.onsets:
        buckets[tick // TICKS_PER_BEAT].append((row, tick % TICKS_PER_BEAT))
    out = []
    for offset in range(0, song.total_beats - BEATS_PER_UNIT + 1, stride_beats):
        onsets = [
            (row, (beat - offset) * TICKS_PER_BEAT + t)
            for beat in range(offset, offset + BEATS_PER_UNIT)
            for row, t in buckets.get(beat, ())
        ]
        out.append(UnitRecord(PianoRollUnit(onsets), song.song_id, song.composer_id, offset, 0))
    return out


def augment(records) -> list[UnitRecord]:
    """Each record under all twelve transpositions, identity included."""
    return [
        replace(r, unit=transpose_unit(r.unit, k), transposition=k)
        for r in records
        for k in TRANSPOSITIONS
    ]


def dedup(records) -> list[UnitRecord]:
    """Keep the first record of each distinct onset matrix, in input order."""
    seen = {}
    out = []
    for r in records:
        key = r.unit.key()
        if key not in seen:
            seen[key] = True
            out.append(r)
    return out


def tile_units(song: SongEvents) -> list[PianoRollUnit]:
    return [r.unit for r in extract_units(song, SEQUENCE_STRIDE)]


def sequence_iter(units, i: int):
    """``(U[i-1], U[i], U[i+1])`` from one tiled song; needs 1 <= i <= len-2."""
    units = list(units)
    if not 1 <= i <= len(units) - 2:
        raise OutOfRange(f"context index {i} outside 1..{len(units) - 2}")
    return units[i - 1], units[i], units[i + 1]


def context_indices(n_units: int) -> range:
    return range(1, max(n_units - 1, 1))


# --------------------------------------------------------------------------
# building and persistence
# --------------------------------------------------------------------------


def build_dataset(
    songs: list[tuple[SongEvents, str]],
    composers: list[str],
    stride_beats: int = SEQUENCE_STRIDE,
    augment_keys: bool = True,
    config: dict | None = None,
) -> Dataset:
    """Extract (and optionally augment) units from ``(song, split)`` pairs."""
    infos, records = [], []
    for song, split in sorted(songs, key=lambda s: s[0].song_id):
        if song.total_beats < BEATS_PER_UNIT:
            log.warning("skipping %s: shorter than one unit", song.song_id)
            continue
        infos.append(SongInfo(song.song_id, song.composer_id, split, song.total_beats))
        recs = extract_units(song, stride_beats)
        if augment_keys:
            recs = augment(recs)
        records.extend(recs)
    records.sort(key=lambda r: (r.song_id, r.transposition, r.beat_offset))
    return Dataset(composers, infos, records, stride_beats, augment_keys, dict(config or {}))


def ingest(
    manifest_csv: str | Path,
    root: str | Path,
    stride_beats=SEQUENCE_STRIDE,
    augment_keys=True,
    config=None,
    workers: int = 1,
) -> Dataset:
    """Read every MIDI file listed in a ``path,composer_name,split`` manifest.

    Files are parsed on up to ``workers`` threads; results are collected in
    manifest order, so the dataset does not depend on the worker count.
    """
    root = Path(root)
    with open(manifest_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"path", "composer_name", "split"} - set(rows[0] if rows else {})
    if missing:
        raise DataError(f"manifest is missing columns: {sorted(missing)}")
    composers = sorted({r["composer_name"] for r in rows})
    cid = {name: i for i, name in enumerate(composers)}
    for row in rows:
        if row["split"] not in ("train", "test"):
            raise DataError(f"bad split {row['split']!r} for {row['path']}")

    def load(row):
        return read_song((root / row["path"]).read_bytes(), row["path"], cid[row["composer_name"]])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parsed = list(pool.map(load, rows))
    songs, rejected = [], []
    for row, song in zip(rows, parsed):
        if song is None:
            rejected.append(row["path"])
            continue
        songs.append((song, row["split"]))
    if rejected:
        log.info("rejected %d files for non-quarter-note time signatures", len(rejected))
    cfg = dict(config or {})
    cfg["rejected"] = rejected
    return build_dataset(songs, composers, stride_beats, augment_keys, cfg)


def _sidecar(path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_dataset(ds: Dataset, path: str | Path) -> None:
    song_index = {s.song_id: i for i, s in enumerate(ds.songs)}
    out = bytearray(MAGIC)
    out += struct.pack("<HH", VERSION, len(ds.composers))
    for name in ds.composers:
        b = name.encode("utf-8")
        out += struct.pack("<H", len(b)) + b
    out += struct.pack("<Q", len(ds.records))
    for r in ds.records:
        onsets = r.unit.onsets
        out += struct.pack(
            "<IHIbH", song_index[r.song_id], r.composer_id, r.beat_offset, r.transposition, len(onsets)
        )
        out += r.unit.key()
    Path(path).write_bytes(bytes(out))
    meta = {
        "format": "BVD1",
        "version": VERSION,
        "composers": ds.composers,
        "songs": [
            {"index": i, "song_id": s.song_id, "composer_id": s.composer_id, "split": s.split, "total_beats": s.total_beats}
            for i, s in enumerate(ds.songs)
        ],
        "stride_beats": ds.stride_beats,
        "augmented": ds.augmented,
        "counts": ds.counts(),
        "config": ds.config,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_header(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise MalformedFile("not a BVD1 dataset file")
    try:
        version, n_comp = struct.unpack_from("<HH", data, 4)
        pos = 8
        names = []
        for _ in range(n_comp):
            (n,) = struct.unpack_from("<H", data, pos)
            names.append(data[pos + 2 : pos + 2 + n].decode("utf-8"))
            pos += 2 + n
        (count,) = struct.unpack_from("<Q", data, pos)
    except struct.error as exc:
        raise MalformedFile(f"truncated BVD1 header: {exc}") from exc
    return {"magic": "BVD1", "version": version, "composers": names, "unit_count": count, "_pos": pos + 8}


def read_dataset(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    head = read_header(data)
    pos = head["_pos"]
    side = _sidecar(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    song_meta = meta.get("songs")
    rec_struct = struct.Struct("<IHIbH")
    raw = []
    try:
        for _ in range(head["unit_count"]):
            si, comp, off, tr, n = rec_struct.unpack_from(data, pos)
            pos += rec_struct.size
            pairs = data[pos : pos + 2 * n]
            if len(pairs) != 2 * n:
                raise MalformedFile("truncated onset list")
            pos += 2 * n
            unit = PianoRollUnit(zip(pairs[0::2], pairs[1::2]))
            raw.append((si, comp, off, tr, unit))
    except struct.error as exc:
        raise MalformedFile(f"truncated BVD1 record: {exc}") from exc
    if song_meta is None:
        # no sidecar: every song is treated as training data
        ids = sorted({r[0] for r in raw})
        song_meta = [{"index": i, "song_id": f"song{i}", "composer_id": -1, "split": "train", "total_beats": 0} for i in ids]
    by_index = {s["index"]: s for s in song_meta}
    songs = [SongInfo(s["song_id"], s["composer_id"], s["split"], s["total_beats"]) for s in song_meta]
    records = [UnitRecord(unit, by_index[si]["song_id"], comp, off, tr) for si, comp, off, tr, unit in raw]
    return Dataset(
        head["composers"],
        songs,
        records,
        meta.get("stride_beats", SEQUENCE_STRIDE),
        meta.get("augmented", False),
        meta.get("config", {}),
    )

