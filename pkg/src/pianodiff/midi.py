"""Standard MIDI File reader (formats 0 and 1, metrical division).

Only what transcription ground truth needs is decoded: note on/off pairs and
the tempo map.  Everything else is skipped by length.
"""
from __future__ import annotations

import bisect
import struct
from collections import defaultdict, deque

from .pianoroll import MAX_PITCH, MIN_PITCH, NoteEvent

DEFAULT_TEMPO_US = 500_000

# data bytes following each channel-message status nibble
_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


class MidiError(Exception):
    pass


class MidiParseError(MidiError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedMidiError(MidiError):
    pass


class _Reader:
    def __init__(self, data: bytes, pos: int, end: int):
        self.data, self.pos, self.end = data, pos, end

    def need(self, n: int) -> None:
        if self.pos + n > self.end:
            raise MidiParseError(f"unexpected end of data, wanted {n} byte(s)", self.pos)

    def byte(self) -> int:
        self.need(1)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        self.need(n)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def varlen(self) -> int:
        start = self.pos
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", start)


def _read_track(data: bytes, start: int, end: int):
    """Return (note_on/off events, tempo events, end tick) for one MTrk body."""
    r = _Reader(data, start, end)
    tick = 0
    running = None
    notes = []   # (tick, is_on, channel, pitch)
    tempos = []  # (tick, microseconds per quarter)
    while r.pos < end:
        tick += r.varlen()
        status_pos = r.pos
        b = r.byte()
        if b == 0xFF:
            running = None
            kind = r.byte()
            payload = r.take(r.varlen())
            if kind == 0x51:
                if len(payload) != 3:
                    raise MidiParseError("tempo event must carry 3 bytes", status_pos)
                tempos.append((tick, int.from_bytes(payload, "big")))
            elif kind == 0x2F:
                break
            continue
        if b in (0xF0, 0xF7):
            running = None
            r.take(r.varlen())
            continue
        if b & 0x80:
            if b >= 0xF0:
                raise MidiParseError(f"unexpected system status 0x{b:02X}", status_pos)
            running = b
            first = r.byte()
        else:
            if running is None:
                raise MidiParseError("data byte without running status", status_pos)
            first = b
        kind, channel = running >> 4, running & 0x0F
        rest = r.take(_DATA_LEN[kind] - 1)
        if kind in (0x8, 0x9):
            velocity = rest[0]
            notes.append((tick, kind == 0x9 and velocity > 0, channel, first))
    return notes, tempos, tick


class TempoMap:
    """Piecewise-linear tick to seconds conversion."""

    def __init__(self, division: int, tempos):
        self.division = division
        changes = {}
        for tick, us in sorted(tempos):
            changes[tick] = us
        if 0 not in changes:
            changes[0] = DEFAULT_TEMPO_US
        self.ticks = sorted(changes)
        self.tempos = [changes[t] for t in self.ticks]
        self.seconds = [0.0]
        for i in range(1, len(self.ticks)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.seconds.append(self.seconds[-1] + span * self.tempos[i - 1] / (1e6 * division))

    def to_seconds(self, tick: int) -> float:
        i = bisect.bisect_right(self.ticks, tick) - 1
        return self.seconds[i] + (tick - self.ticks[i]) * self.tempos[i] / (1e6 * self.division)


def parse_midi(data: bytes) -> list[NoteEvent]:
    """Decode the notes of a Standard MIDI File.

    Note-ons are paired with note-offs per (channel, pitch), first in first
    out.  A note-on with velocity 0 counts as a note-off.  Notes left open are
    closed at the end of their track.  Zero-length notes and pitches outside
    the piano range are dropped.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError(f"bad header length {hlen}", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise UnsupportedMidiError(f"SMF format {fmt} is not supported")
    if division & 0x8000:
        raise UnsupportedMidiError("SMPTE time division is not supported")
    if division == 0:
        raise MidiParseError("division of 0 ticks per quarter", 12)

    pos = 8 + hlen
    tracks = []
    while pos < len(data) and len(tracks) < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        tag = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = pos + 8
        if body + length > len(data):
            raise MidiParseError(f"chunk length {length} runs past end of file", pos + 4)
        if tag == b"MTrk":
            tracks.append(_read_track(data, body, body + length))
        pos = body + length
    if len(tracks) < ntracks:
        raise MidiParseError(f"header declares {ntracks} tracks, found {len(tracks)}", pos)

    tempo_map = TempoMap(division, [t for _, tempos, _ in tracks for t in tempos])
    out = []
    for events, _, end_tick in tracks:
        pending = defaultdict(deque)
        spans = []
        for tick, is_on, channel, pitch in events:
            if is_on:
                pending[channel, pitch].append(tick)
            elif pending[channel, pitch]:
                spans.append((pitch, pending[channel, pitch].popleft(), tick))
        for (_, pitch), starts in pending.items():
            spans.extend((pitch, on, end_tick) for on in starts)
        for pitch, on, off in spans:
            if off <= on or not MIN_PITCH <= pitch <= MAX_PITCH:
                continue
            out.append(NoteEvent(pitch, tempo_map.to_seconds(on), tempo_map.to_seconds(off)))
    out.sort(key=lambda n: (n.onset_s, n.pitch, n.offset_s))
    return out


def read_midi(path) -> list[NoteEvent]:
    with open(path, "rb") as f:
        return parse_midi(f.read())
