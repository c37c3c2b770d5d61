"""Standard MIDI File reading/writing and the 128x128 piano-roll encoding.

Rows of a roll are pitches (row ``r`` is MIDI pitch ``127 - r``, so high notes
sit at the top of the image) and columns are quantized time steps of
``step_ticks`` ticks each.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import MalformedEvent, MalformedHeader, ShapeMismatch, TruncatedTrack, UnsupportedFormat

ROLL_SIZE = 128
DRUM_CHANNEL = 9
DEFAULT_VELOCITY = 100
DEFAULT_TEMPO_US = 500_000  # 120 BPM

_NOTE_OFF = 0x80
_NOTE_ON = 0x90
# data bytes following each channel-message status nibble
_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: int
    duration: int
    velocity: int = DEFAULT_VELOCITY
    track: int = 0

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside 0..127")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if self.duration < 1:
            raise ValueError(f"duration {self.duration} < 1")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 1..127")
        if self.track < 0:
            raise ValueError(f"negative track {self.track}")

    @property
    def end(self) -> int:
        return self.onset + self.duration

    def sort_key(self) -> tuple:
        return (self.onset, self.pitch, self.track, self.duration, self.velocity)


@dataclass(frozen=True)
class MidiSong:
    """Note-level view of a MIDI file in the tick domain."""

    ppq: int
    notes: tuple[NoteEvent, ...] = ()

    def __post_init__(self):
        if self.ppq <= 0:
            raise ValueError(f"ppq must be positive, got {self.ppq}")
        notes = tuple(self.notes)
        object.__setattr__(self, "notes", notes)
        keys = [n.sort_key() for n in notes]
        if any(a > b for a, b in zip(keys, keys[1:])):
            raise ValueError("notes must be sorted by (onset, pitch, track)")

    @classmethod
    def from_notes(cls, ppq: int, notes: Iterable[NoteEvent]) -> "MidiSong":
        return cls(ppq, tuple(sorted(notes, key=NoteEvent.sort_key)))

    @property
    def end_tick(self) -> int:
        return max((n.end for n in self.notes), default=0)

    def with_velocity(self, velocity: int = DEFAULT_VELOCITY, track: int | None = 0) -> "MidiSong":
        """Copy with every velocity (and, unless ``track`` is None, track) replaced."""
        return MidiSong.from_notes(
            self.ppq,
            (
                NoteEvent(n.pitch, n.onset, n.duration, velocity, n.track if track is None else track)
                for n in self.notes
            ),
        )


class ValueDomain(enum.Enum):
    BINARY01 = "binary01"
    SIGNED11 = "signed11"


@dataclass(eq=False)
class PianoRoll:
    grid: np.ndarray
    value_domain: ValueDomain = ValueDomain.BINARY01
    step_ticks: int = 24

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.shape != (ROLL_SIZE, ROLL_SIZE):
            raise ShapeMismatch(f"roll grid must be {ROLL_SIZE}x{ROLL_SIZE}, got {self.grid.shape}")
        if self.step_ticks <= 0:
            raise ValueError("step_ticks must be positive")
        if self.value_domain is ValueDomain.BINARY01:
            if not np.all((self.grid == 0) | (self.grid == 1)):
                raise ValueError("Binary01 roll contains values other than 0 and 1")
        elif np.any(np.abs(self.grid) > 1):
            raise ValueError("Signed11 roll contains values outside [-1, 1]")

    def __eq__(self, other):
        if not isinstance(other, PianoRoll):
            return NotImplemented
        return (
            self.value_domain is other.value_domain
            and self.step_ticks == other.step_ticks
            and np.array_equal(self.grid, other.grid)
        )

    def binarize(self, threshold: float | None = None) -> "PianoRoll":
        if threshold is None:
            threshold = 0.5 if self.value_domain is ValueDomain.BINARY01 else 0.0
        grid = (self.grid >= threshold).astype(np.float32)
        return PianoRoll(grid, ValueDomain.BINARY01, self.step_ticks)

    @property
    def n_on(self) -> int:
        on = self.grid >= (0.5 if self.value_domain is ValueDomain.BINARY01 else 0.0)
        return int(on.sum())


def default_step_ticks(ppq: int, step_div: int = 4) -> int:
    """Ticks per roll column; ``step_div=4`` gives a sixteenth-note grid."""
    if step_div < 1:
        raise ValueError("step_div must be >= 1")
    return max(1, ppq // step_div)


# ---------------------------------------------------------------------------
# SMF parsing


def _read_vlq(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise TruncatedTrack("variable-length quantity runs past end of track")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MalformedEvent("variable-length quantity longer than 4 bytes")


def _encode_vlq(value: int) -> bytes:
    if value < 0:
        raise ValueError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _parse_track(data: bytes, pos: int, end: int, track: int, include_drums: bool) -> list[NoteEvent]:
    tick = 0
    status = None
    # open notes per (channel, pitch): FIFO of (onset, velocity)
    open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    notes: list[NoteEvent] = []

    def close(key, at):
        onset, vel = open_notes[key].pop(0)
        if at > onset:
            notes.append(NoteEvent(key[1], onset, at - onset, vel, track))

    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise TruncatedTrack("event missing after delta time")
        byte = data[pos]
        if byte == 0xFF:
            if pos + 2 > end:
                raise TruncatedTrack("truncated meta event")
            meta_type = data[pos + 1]
            length, pos = _read_vlq(data, pos + 2, end)
            pos += length
            if pos > end:
                raise TruncatedTrack("meta event runs past end of track")
            status = None
            if meta_type == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, pos = _read_vlq(data, pos + 1, end)
            pos += length
            if pos > end:
                raise TruncatedTrack("sysex event runs past end of track")
            status = None
            continue
        if byte & 0x80:
            if byte >= 0xF0:
                raise MalformedEvent(f"unsupported system message 0x{byte:02X} in track")
            status = byte
            pos += 1
        elif status is None:
            raise MalformedEvent("data byte without running status")
        kind, channel = status >> 4, status & 0x0F
        n = _DATA_LEN[kind]
        if pos + n > end:
            raise TruncatedTrack("channel message runs past end of track")
        args = data[pos:pos + n]
        pos += n
        if kind not in (0x8, 0x9):
            continue
        if channel == DRUM_CHANNEL and not include_drums:
            continue
        pitch, velocity = args[0] & 0x7F, args[1] & 0x7F
        key = (channel, pitch)
        if kind == 0x9 and velocity > 0:
            open_notes.setdefault(key, []).append((tick, velocity))
        elif open_notes.get(key):
            close(key, tick)

    for key, pending in open_notes.items():
        while pending:
            onset, vel = pending.pop(0)
            # unpaired Note-On: close at the final track tick (at least one tick long)
            notes.append(NoteEvent(key[1], onset, max(1, tick - onset), vel, track))
    return notes


def parse_midi(data: bytes, include_drums: bool = False) -> MidiSong:
    """Parse SMF format 0/1 bytes into a :class:`MidiSong`.

    Tempo and other meta events are skipped; only the tick domain survives.
    Notes on the drum channel (10, zero-based 9) are dropped unless
    ``include_drums`` is set.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd header")
    (hdr_len,) = struct.unpack(">I", data[4:8])
    if hdr_len < 6:
        raise MalformedHeader(f"header length {hdr_len} < 6")
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormat("SMF format 2 is not supported")
    if fmt not in (0, 1):
        raise MalformedHeader(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("division of zero ticks per quarter note")

    pos = 8 + hdr_len
    notes: list[NoteEvent] = []
    track = 0
    while track < ntrks:
        if pos + 8 > len(data):
            raise TruncatedTrack(f"expected {ntrks} tracks, found {track}")
        chunk_id = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        start, end = pos + 8, pos + 8 + length
        if end > len(data):
            raise TruncatedTrack("track chunk length exceeds file size")
        if chunk_id == b"MTrk":
            notes.extend(_parse_track(data, start, end, track, include_drums))
            track += 1
        pos = end
    return MidiSong.from_notes(division, notes)


# ---------------------------------------------------------------------------
# SMF writing


def _assign_channels(notes: Sequence[NoteEvent]) -> list[int]:
    """Give overlapping same-pitch notes distinct channels so pairing is unambiguous."""
    channels = [c for c in range(16) if c != DRUM_CHANNEL]
    busy_until: dict[tuple[int, int], int] = {}
    out = []
    for n in notes:
        for c in channels:
            if busy_until.get((c, n.pitch), -1) <= n.onset:
                busy_until[(c, n.pitch)] = n.end
                out.append(c)
                break
        else:
            raise ValueError(f"more than {len(channels)} overlapping notes of pitch {n.pitch}")
    return out


def _track_chunk(notes: Sequence[NoteEvent], with_tempo: bool) -> bytes:
    # (tick, order, payload): offs sort before ons at the same tick
    events: list[tuple[int, int, int, bytes]] = []
    if with_tempo:
        events.append((0, -1, 0, b"\xff\x51\x03" + DEFAULT_TEMPO_US.to_bytes(3, "big")))
    for i, (n, ch) in enumerate(zip(notes, _assign_channels(notes))):
        events.append((n.onset, 1, i, bytes([_NOTE_ON | ch, n.pitch, n.velocity])))
        events.append((n.end, 0, i, bytes([_NOTE_OFF | ch, n.pitch, 64])))
    events.sort(key=lambda e: e[:3])
    body = bytearray()
    last = 0
    for tick, _, _, payload in events:
        body += _encode_vlq(tick - last) + payload
        last = tick
    body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_midi(song: MidiSong) -> bytes:
    """Serialize to SMF bytes.

    A song whose notes all live on track 0 becomes a format-0 file with one
    track. Songs spanning several tracks are written as format 1 so that
    ``parse_midi(write_midi(s)) == s`` holds for them too.
    """
    n_tracks = max((n.track for n in song.notes), default=0) + 1
    fmt = 0 if n_tracks == 1 else 1
    out = bytearray(b"MThd" + struct.pack(">IHHH", 6, fmt, n_tracks, song.ppq))
    for t in range(n_tracks):
        out += _track_chunk([n for n in song.notes if n.track == t], with_tempo=t == 0)
    return bytes(out)


# ---------------------------------------------------------------------------
# quantization and roll conversion


def _snap(value: int, step: int) -> int:
    return ((value + step // 2) // step) * step


def quantize(song: MidiSong, step_ticks: int) -> MidiSong:
    """Snap onsets and durations to the grid and merge same-pitch notes that touch."""
    if step_ticks < 1:
        raise ValueError("step_ticks must be >= 1")
    snapped = sorted(
        (
            NoteEvent(n.pitch, _snap(n.onset, step_ticks), max(step_ticks, _snap(n.duration, step_ticks)),
                      n.velocity, n.track)
            for n in song.notes
        ),
        key=lambda n: (n.pitch, n.onset, n.track, n.duration, n.velocity),
    )
    merged: list[NoteEvent] = []
    for n in snapped:
        prev = merged[-1] if merged else None
        if prev is not None and prev.pitch == n.pitch and n.onset <= prev.end:
            end = max(prev.end, n.end)
            merged[-1] = NoteEvent(prev.pitch, prev.onset, end - prev.onset, prev.velocity, prev.track)
        else:
            merged.append(n)
    return MidiSong.from_notes(song.ppq, merged)


def _global_columns(song: MidiSong, step_ticks: int) -> int:
    return -(-song.end_tick // step_ticks)


def encode(song: MidiSong, window: int = 0, step_ticks: int | None = None) -> PianoRoll:
    """Binary roll of columns ``128*window .. 128*window+127`` of the song's grid."""
    if window < 0:
        raise ValueError("window must be >= 0")
    step = step_ticks or default_step_ticks(song.ppq)
    grid = np.zeros((ROLL_SIZE, ROLL_SIZE), dtype=np.float32)
    offset = window * ROLL_SIZE
    for n in song.notes:
        first = n.onset // step - offset
        last = (n.end - 1) // step - offset
        if last < 0 or first >= ROLL_SIZE:
            continue
        grid[127 - n.pitch, max(first, 0):min(last, ROLL_SIZE - 1) + 1] = 1.0
    return PianoRoll(grid, ValueDomain.BINARY01, step)


def decode(roll: PianoRoll, threshold: float = 0.5, ppq: int = 96) -> MidiSong:
    """Turn every maximal horizontal run of on-cells into one note (velocity 100)."""
    on = roll.grid >= threshold
    step = roll.step_ticks
    notes = []
    for row in range(ROLL_SIZE):
        cells = on[row]
        if not cells.any():
            continue
        padded = np.concatenate(([False], cells, [False])).astype(np.int8)
        edges = np.diff(padded)
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        for a, b in zip(starts, stops):
            notes.append(NoteEvent(127 - row, int(a) * step, int(b - a) * step, DEFAULT_VELOCITY, 0))
    return MidiSong.from_notes(ppq, notes)


def segment(song: MidiSong, step_ticks: int | None = None) -> list[PianoRoll]:
    """Consecutive non-overlapping 128-column windows, dropping empty ones."""
    step = step_ticks or default_step_ticks(song.ppq)
    n_windows = max(1, -(-_global_columns(song, step) // ROLL_SIZE))
    rolls = (encode(song, w, step) for w in range(n_windows))
    return [r for r in rolls if r.grid.any()]


# ---------------------------------------------------------------------------
# PGM export


def grid_to_pgm(grid: np.ndarray, domain: ValueDomain = ValueDomain.BINARY01) -> bytes:
    """Binary PGM (P5) bytes for any 2-D array; 0 is black/off and 255 white/on."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    if domain is ValueDomain.SIGNED11:
        grid = (grid + 1.0) / 2.0
    pixels = np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def roll_to_pgm(roll: PianoRoll) -> bytes:
    return grid_to_pgm(roll.grid, roll.value_domain)


def read_pgm(data: bytes) -> np.ndarray:
    """Inverse of :func:`grid_to_pgm` (values scaled back into [0, 1])."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(f) for f in fields[1:])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError("truncated PGM pixel data")
    return pixels.reshape(h, w).astype(np.float32) / maxval
