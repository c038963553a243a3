"""Multi-state piano rolls and their conversion to and from note events.

A roll is a ``frames x 88`` grid of :class:`NoteState` codes.  Row ``t`` covers
the time span ``[t * hop_s, (t + 1) * hop_s)`` and column ``p`` is MIDI pitch
``21 + p``.
"""
from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MIN_PITCH = 21
MAX_PITCH = 108
NUM_PITCHES = 88
NUM_LABEL_STATES = 5
DEFAULT_HOP_S = 0.02

# tolerance for "time lands exactly on a frame boundary" under float division
_FRAME_EPS = 1e-9


class NoteState(enum.IntEnum):
    OFF = 0
    OFFSET = 1
    ONSET = 2
    SUSTAIN = 3
    REONSET = 4
    MASK = 5


_PRIORITY = np.zeros(6, dtype=np.int8)
_PRIORITY[NoteState.OFF] = 0
_PRIORITY[NoteState.SUSTAIN] = 1
_PRIORITY[NoteState.OFFSET] = 2
_PRIORITY[NoteState.ONSET] = 3
_PRIORITY[NoteState.REONSET] = 4


class InvalidRollError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class NoteEvent:
    pitch: int
    onset_s: float
    offset_s: float

    def __post_init__(self):
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise ValueError(f"pitch {self.pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")
        if self.onset_s < 0:
            raise ValueError(f"negative onset {self.onset_s}")
        if not self.offset_s > self.onset_s:
            raise ValueError(f"offset {self.offset_s} not after onset {self.onset_s}")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass
class MultiStateRoll:
    states: np.ndarray
    hop_s: float = DEFAULT_HOP_S
    truncated: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.states.ndim != 2 or self.states.shape[1] != NUM_PITCHES:
            raise InvalidRollError(f"roll must be (frames, {NUM_PITCHES}), got {self.states.shape}")
        if self.states.shape[0] < 1:
            raise InvalidRollError("roll needs at least one frame")
        if not self.hop_s > 0:
            raise InvalidRollError(f"hop_s must be positive, got {self.hop_s}")

    @property
    def frames(self) -> int:
        return self.states.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MultiStateRoll):
            return NotImplemented
        return self.hop_s == other.hop_s and np.array_equal(self.states, other.states)


def time_to_frame(seconds: float, hop_s: float) -> int:
    return int(math.floor(seconds / hop_s + _FRAME_EPS))


def encode_roll(notes: Iterable[NoteEvent], hop_s: float = DEFAULT_HOP_S,
                frames: int | None = None) -> MultiStateRoll:
    """Rasterize notes into a multi-state roll.

    The frame holding a note's onset gets ``ONSET``, or ``REONSET`` when the
    previous note on that pitch still sounds there or ends exactly there.
    Body frames get ``SUSTAIN`` and the frame holding the offset gets
    ``OFFSET``.  Collisions resolve as reonset > onset > offset > sustain > off.
    Notes running past an explicit ``frames`` bound are cut and the result is
    flagged ``truncated``.
    """
    if not hop_s > 0:
        raise ValueError(f"hop_s must be positive, got {hop_s}")
    notes = sorted(notes, key=lambda n: (n.pitch, n.onset_s, n.offset_s))
    spans = [(n.pitch - MIN_PITCH, time_to_frame(n.onset_s, hop_s),
              max(time_to_frame(n.offset_s, hop_s), time_to_frame(n.onset_s, hop_s)))
             for n in notes]
    if frames is None:
        frames = max([off + 1 for _, _, off in spans], default=1)
    states = np.zeros((frames, NUM_PITCHES), dtype=np.int64)
    prio = np.zeros((frames, NUM_PITCHES), dtype=np.int8)
    truncated = False

    def claim(t, p, state):
        if t < frames and _PRIORITY[state] > prio[t, p]:
            states[t, p] = state
            prio[t, p] = _PRIORITY[state]

    prev_pitch, prev_on, prev_off = None, None, None
    for p, on, off in spans:
        if off >= frames:
            truncated = True
        if on >= frames:
            prev_pitch, prev_on, prev_off = p, on, off
            continue
        retrigger = prev_pitch == p and prev_on <= on <= prev_off
        claim(on, p, NoteState.REONSET if retrigger else NoteState.ONSET)
        for t in range(on + 1, min(off, frames)):
            claim(t, p, NoteState.SUSTAIN)
        if off > on:
            claim(off, p, NoteState.OFFSET)
        if prev_pitch == p and prev_off is not None and prev_off > off:
            off = prev_off
        prev_pitch, prev_on, prev_off = p, on, off
    return MultiStateRoll(states, hop_s, truncated)


def decode_notes(roll: MultiStateRoll) -> list[NoteEvent]:
    states = np.asarray(roll.states)
    if np.any(states == NoteState.MASK):
        raise InvalidRollError("roll still contains mask states")
    if np.any((states < 0) | (states > NoteState.MASK)):
        raise InvalidRollError("roll contains unknown state codes")
    hop = roll.hop_s
    T = states.shape[0]
    notes = []
    for p in np.flatnonzero(np.any((states == NoteState.ONSET) | (states == NoteState.REONSET), axis=0)):
        column = states[:, p]
        start = None
        for t in range(T):
            s = column[t]
            if start is not None and s in (NoteState.OFFSET, NoteState.OFF, NoteState.REONSET):
                notes.append(NoteEvent(MIN_PITCH + int(p), start * hop, t * hop))
                start = None
            if s in (NoteState.ONSET, NoteState.REONSET):
                start = t
        if start is not None:
            notes.append(NoteEvent(MIN_PITCH + int(p), start * hop, T * hop))
    notes.sort(key=lambda n: (n.onset_s, n.pitch))
    return notes


# ---------------------------------------------------------------- note CSV

NOTE_CSV_HEADER = ("pitch", "onset_s", "offset_s")


def write_notes_csv(path: str | os.PathLike, notes: Sequence[NoteEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(NOTE_CSV_HEADER)
        for n in notes:
            w.writerow([n.pitch, repr(float(n.onset_s)), repr(float(n.offset_s))])


def read_notes_csv(path: str | os.PathLike) -> list[NoteEvent]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(c.strip() for c in rows[0]) != NOTE_CSV_HEADER:
        raise ValueError(f"{path}: expected header {','.join(NOTE_CSV_HEADER)}")
    return [NoteEvent(int(r[0]), float(r[1]), float(r[2])) for r in rows[1:] if r]


# ---------------------------------------------------------------- images

STATE_COLORS = {
    NoteState.OFF: (255, 255, 255),
    NoteState.OFFSET: (140, 140, 140),
    NoteState.ONSET: (0, 0, 0),
    NoteState.SUSTAIN: (70, 70, 70),
    NoteState.REONSET: (0, 110, 0),
    NoteState.MASK: (240, 200, 0),
}
OVERLAY_COLORS = {
    "correct": (150, 150, 150),
    "mispredicted": (220, 30, 30),
    "unpredicted": (30, 60, 220),
}


def _write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def render_roll(roll: MultiStateRoll, path, reference: Sequence[NoteEvent] | None = None,
                onset_tol_s: float = 0.05) -> None:
    """Write ``roll`` as a PPM image, one pixel per (frame, pitch).

    Row 0 is frame 0 and column 0 is pitch 21.  With ``reference`` notes the
    image becomes an error overlay: notes decoded from ``roll`` that match a
    reference onset are grey, unmatched estimates red, missed references blue.
    """
    states = np.asarray(roll.states)
    if reference is None:
        rgb = np.empty(states.shape + (3,), dtype=np.uint8)
        for state, color in STATE_COLORS.items():
            rgb[states == state] = color
        _write_ppm(path, rgb)
        return

    from .metrics import NoteMatchConfig, match_notes

    est = decode_notes(roll)
    ref = list(reference)
    pairs = match_notes(ref, est, NoteMatchConfig(onset_tol_s=onset_tol_s))
    matched_ref = {r for r, _ in pairs}
    matched_est = {e for _, e in pairs}
    rgb = np.full(states.shape + (3,), 255, dtype=np.uint8)

    def paint(note, color):
        a = time_to_frame(note.onset_s, roll.hop_s)
        b = max(a + 1, time_to_frame(note.offset_s, roll.hop_s))
        rgb[a:b, note.pitch - MIN_PITCH] = color

    for i, n in enumerate(ref):
        if i not in matched_ref:
            paint(n, OVERLAY_COLORS["unpredicted"])
    for i, n in enumerate(est):
        paint(n, OVERLAY_COLORS["correct" if i in matched_est else "mispredicted"])
    _write_ppm(path, rgb)
