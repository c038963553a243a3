"""Seeded synthetic corpora: note lists, their rolls and rendered features."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kvtext
from .encoder import FeatureGrid, SynthRenderConfig, render_features
from .pianoroll import (MAX_PITCH, MIN_PITCH, MultiStateRoll, NoteEvent, encode_roll,
                        read_notes_csv, write_notes_csv)

CHORD_INTERVALS = (3, 4, 5, 7, 8, 9, 12)
MANIFEST = "manifest.txt"


class GenerationError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    num_pieces: int = 240
    frames: int = 128
    hop_s: float = 0.02
    density: float = 6.0            # expected note events per second
    pitch_low: int = 36
    pitch_high: int = 96
    min_frames: int = 2             # note duration bounds, in frames
    max_frames: int = 30
    chord_prob: float = 0.3
    split_ratios: tuple = (10, 1, 1)  # train / valid / test weights
    seed: int = 0
    render: SynthRenderConfig = field(default_factory=SynthRenderConfig)

    def __post_init__(self):
        if not MIN_PITCH <= self.pitch_low <= self.pitch_high <= MAX_PITCH:
            raise ValueError("pitch range must lie within [21, 108]")
        if self.num_pieces < 1 or self.frames < 2 or self.hop_s <= 0:
            raise ValueError("num_pieces, frames and hop_s must be positive")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if self.density < 0 or not 0 <= self.chord_prob <= 1:
            raise ValueError("density must be >= 0 and chord_prob in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        render = d.pop("render")
        d.update({f"render.{k}": v for k, v in render.items()})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        render = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("render.")}
        for k in ("harmonic_offsets", "harmonic_weights"):
            if k in render and not isinstance(render[k], tuple):
                render[k] = (render[k],)
        known = {f.name for f in fields(cls)} - {"render"}
        top = {k: v for k, v in d.items() if k in known}
        if "split_ratios" in top:
            top["split_ratios"] = tuple(top["split_ratios"])
        return cls(render=SynthRenderConfig(**render), **top)


@dataclass
class Piece:
    index: int
    notes: list
    roll: MultiStateRoll
    features: FeatureGrid


def _sample_notes(cfg: CorpusConfig, rng: np.random.Generator) -> list[NoteEvent]:
    duration = cfg.frames * cfg.hop_s
    n_events = rng.poisson(cfg.density * duration) if cfg.density > 0 else 0
    span = cfg.pitch_high - cfg.pitch_low + 1
    if n_events * cfg.min_frames > cfg.frames * span:
        raise GenerationError(f"{n_events} notes cannot be placed in {cfg.frames} frames x {span} pitches")
    raw = []  # (pitch, onset frame, offset frame)
    last = cfg.frames - 1  # offset marker must land inside the roll
    for _ in range(n_events):
        on = int(rng.integers(0, last))
        length = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        root = int(rng.integers(cfg.pitch_low, cfg.pitch_high + 1))
        pitches = [root]
        if rng.random() < cfg.chord_prob:
            for iv in rng.choice(CHORD_INTERVALS, size=int(rng.integers(1, 3)), replace=False):
                if root + iv <= cfg.pitch_high:
                    pitches.append(root + int(iv))
        for p in pitches:
            raw.append((p, on, min(on + length, last)))

    # resolve same-pitch overlaps by cutting the earlier note at the later onset
    raw.sort()
    kept = []
    for p, on, off in raw:
        if kept and kept[-1][0] == p and kept[-1][2] > on:
            prev = kept.pop()
            if on > prev[1]:
                kept.append((p, prev[1], on))
            else:
                off = max(off, prev[2])  # same onset frame: merge
        kept.append((p, on, off))
    notes = [NoteEvent(p, on * cfg.hop_s, off * cfg.hop_s) for p, on, off in kept if off > on]
    notes.sort(key=lambda n: (n.onset_s, n.pitch))
    return notes


def gen_piece(cfg: CorpusConfig, piece_index: int) -> Piece:
    notes = _sample_notes(cfg, np.random.default_rng([cfg.seed, piece_index, 0]))
    roll = encode_roll(notes, cfg.hop_s, cfg.frames)
    features = render_features(roll, cfg.render, np.random.default_rng([cfg.seed, piece_index, 1]))
    return Piece(piece_index, notes, roll, features)


def splits(cfg: CorpusConfig) -> dict[str, list[int]]:
    """Train / valid / test piece indices; a pure function of seed, size and ratios."""
    w = np.asarray(cfg.split_ratios, dtype=float)
    counts = np.floor(w / w.sum() * cfg.num_pieces).astype(int)
    counts[0] += cfg.num_pieces - counts.sum()
    order = np.random.default_rng([cfg.seed, 7]).permutation(cfg.num_pieces)
    a, b = counts[0], counts[0] + counts[1]
    return {"train": sorted(order[:a].tolist()), "valid": sorted(order[a:b].tolist()),
            "test": sorted(order[b:].tolist())}


class Corpus:
    """Lazily generated pieces with per-split access."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        self.split_indices = splits(cfg)
        self._cache: dict[int, Piece] = {}

    def piece(self, index: int) -> Piece:
        if index not in self._cache:
            self._cache[index] = gen_piece(self.cfg, index)
        return self._cache[index]

    def split(self, name: str) -> list[Piece]:
        return [self.piece(i) for i in self.split_indices[name]]


def write_corpus(cfg: CorpusConfig, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.num_pieces):
        write_notes_csv(directory / f"piece_{i:05d}.csv", gen_piece(cfg, i).notes)
    manifest = cfg.to_dict()
    manifest["config_hash"] = kvtext.content_hash(cfg.to_dict())
    kvtext.dump(directory / MANIFEST, manifest)
    return manifest


def read_corpus(directory, check_notes: bool = True) -> Corpus:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise CorpusError(f"no manifest in {directory}")
    manifest = kvtext.load(path)
    stored = manifest.pop("config_hash", None)
    if stored != kvtext.content_hash(manifest):
        raise CorpusError("manifest does not match its config hash")
    cfg = CorpusConfig.from_dict(manifest)
    corpus = Corpus(cfg)
    if check_notes:
        for i in range(cfg.num_pieces):
            f = directory / f"piece_{i:05d}.csv"
            if not f.exists() or read_notes_csv(f) != corpus.piece(i).notes:
                raise CorpusError(f"{f.name} does not match the regenerated piece")
    return corpus
