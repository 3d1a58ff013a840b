"""Standard MIDI File reading (formats 0/1, PPQ division) and onset extraction.

Only note-on events with non-zero velocity survive; durations, velocities
and tempo are irrelevant to the onset grid. A tiny writer is included so
tests and the toy corpus can synthesize files.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

from .errors import EmptySong, MalformedFile, UnsupportedFormat
from .pianoroll import TICKS_PER_BEAT, fold_pitch, quantize_tick

# data-byte counts for channel voice messages, keyed by status high nibble
_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


@dataclass(frozen=True)
class TimeSignature:
    tick: int
    numerator: int
    denominator: int


@dataclass
class RawMidi:
    format: int
    division: int
    notes: list[tuple[int, int]] = field(default_factory=list)  # (abs tick, pitch)
    time_signatures: list[TimeSignature] = field(default_factory=list)
    n_tracks: int = 0


@dataclass(frozen=True)
class SongEvents:
    song_id: str
    composer_id: int
    onsets: tuple[tuple[int, int], ...]  # (grid_tick, pitch_row), sorted
    total_beats: int


class _Reader:
    def __init__(self, data: bytes, start: int = 0, end: int | None = None):
        self.data = data
        self.pos = start
        self.end = len(data) if end is None else end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MalformedFile(f"unexpected end of data at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        if self.pos >= self.end:
            raise MalformedFile(f"unexpected end of data at byte {self.pos}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MalformedFile("variable-length quantity longer than 4 bytes")


def parse_smf(data: bytes) -> RawMidi:
    """Parse an SMF byte string into absolute-tick note-ons and time signatures.

    Tracks of a format-1 file are merged; note-ons are returned sorted by
    (tick, pitch).
    """
    data = bytes(data)
    r = _Reader(data)
    if r.take(4) != b"MThd":
        raise MalformedFile("missing MThd header")
    (hlen,) = struct.unpack(">I", r.take(4))
    if hlen < 6:
        raise MalformedFile(f"header length {hlen} < 6")
    fmt, ntracks, division = struct.unpack(">HHH", r.take(6))
    r.take(hlen - 6)
    if fmt == 2:
        raise UnsupportedFormat("SMF format 2 is not supported")
    if fmt not in (0, 1):
        raise MalformedFile(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise MalformedFile("division of zero ticks per quarter note")

    raw = RawMidi(format=fmt, division=division)
    while raw.n_tracks < ntracks:
        chunk_id = r.take(4)
        (clen,) = struct.unpack(">I", r.take(4))
        if r.pos + clen > r.end:
            raise MalformedFile("chunk length runs past end of file")
        if chunk_id == b"MTrk":
            _parse_track(_Reader(data, r.pos, r.pos + clen), raw)
            raw.n_tracks += 1
        elif not all(32 <= c < 127 for c in chunk_id):
            raise MalformedFile(f"bad chunk id {chunk_id!r}")
        r.pos += clen
    raw.notes.sort()
    raw.time_signatures.sort(key=lambda ts: ts.tick)
    return raw


def _parse_track(r: _Reader, raw: RawMidi) -> None:
    tick = 0
    status = None
    while r.pos < r.end:
        tick += r.varlen()
        b = r.byte()
        if b == 0xFF:
            kind = r.byte()
            payload = r.take(r.varlen())
            if kind == 0x2F:
                return
            if kind == 0x58:
                if len(payload) < 2:
                    raise MalformedFile("short time-signature event")
                raw.time_signatures.append(TimeSignature(tick, payload[0], 2 ** payload[1]))
            continue
        if b in (0xF0, 0xF7):
            r.take(r.varlen())
            continue
        if b & 0x80:
            if b >= 0xF0:
                raise MalformedFile(f"unexpected system status byte {b:#x}")
            status = b
            first = r.byte()
        else:
            if status is None:
                raise MalformedFile("running status with no previous status byte")
            first = b
        n = _CHANNEL_DATA_LEN[status >> 4]
        second = r.byte() if n == 2 else None
        if status >> 4 == 0x9 and second:
            raw.notes.append((tick, first & 0x7F))


def filter_time_signature(time_signatures) -> bool:
    """Accept iff every time signature has a quarter-note beat (denominator 4)."""
    return all(ts.denominator == 4 for ts in time_signatures)


def to_song_events(notes, division: int, song_id: str, composer_id: int) -> SongEvents:
    grid = sorted({(quantize_tick(t, division), fold_pitch(p)) for t, p in notes})
    if not grid:
        raise EmptySong(f"{song_id}: no note onsets")
    total_beats = math.ceil((grid[-1][0] + 1) / TICKS_PER_BEAT)
    return SongEvents(song_id, composer_id, tuple(grid), total_beats)


def read_song(data: bytes, song_id: str, composer_id: int) -> SongEvents | None:
    """Parse and convert a file; ``None`` when its time signature is rejected."""
    raw = parse_smf(data)
    if not filter_time_signature(raw.time_signatures):
        return None
    return to_song_events(raw.notes, raw.division, song_id, composer_id)


# --------------------------------------------------------------------------
# writing (test fixtures and toy corpora only)
# --------------------------------------------------------------------------


def encode_varlen(value: int) -> bytes:
    if value < 0 or value > 0x0FFFFFFF:
        raise ValueError("varlen out of range")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _track(events) -> bytes:
    """events: iterable of (abs_tick, order, bytes), sorted on write."""
    body = bytearray()
    last = 0
    for tick, _, msg in sorted(events):
        body += encode_varlen(tick - last) + msg
        last = tick
    body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_smf(
    notes,
    division: int = 480,
    time_signature: tuple[int, int] | None = (4, 4),
    n_tracks: int = 1,
    duration: int | None = None,
) -> bytes:
    """Build an SMF from ``(abs_tick, pitch)`` note-ons.

    With ``n_tracks > 1`` a format-1 file is written and notes are dealt to
    tracks round-robin. Each note is closed by a velocity-0 note-on after
    ``duration`` ticks (default: one quarter note).
    """
    duration = division if duration is None else duration
    tracks = [[] for _ in range(n_tracks)]
    if time_signature is not None:
        num, den = time_signature
        tracks[0].append((0, 0, bytes([0xFF, 0x58, 0x04, num, int(math.log2(den)), 24, 8])))
    for i, (tick, pitch) in enumerate(sorted(notes)):
        ch = tracks[i % n_tracks]
        ch.append((tick, 2, bytes([0x90, pitch, 64])))
        ch.append((tick + duration, 1, bytes([0x90, pitch, 0])))
    fmt = 0 if n_tracks == 1 else 1
    header = b"MThd" + struct.pack(">IHHH", 6, fmt, n_tracks, division)
    return header + b"".join(_track(t) for t in tracks)
