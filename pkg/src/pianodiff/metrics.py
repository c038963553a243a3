"""Note-level precision / recall / F1 with mir_eval matching semantics."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .pianoroll import NoteEvent


@dataclass(frozen=True)
class NoteMatchConfig:
    onset_tol_s: float = 0.05
    offset_min_tol_s: float = 0.05
    offset_ratio: float = 0.2
    use_offsets: bool = False

    def __post_init__(self):
        if self.onset_tol_s <= 0 or self.offset_min_tol_s <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.offset_ratio < 1:
            raise ValueError("offset_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    match_count: int
    ref_count: int
    est_count: int


def admissible(r: NoteEvent, e: NoteEvent, cfg: NoteMatchConfig) -> bool:
    if r.pitch != e.pitch:
        return False
    # small slack so tolerances hold exactly at the boundary despite float error
    if abs(r.onset_s - e.onset_s) > cfg.onset_tol_s + 1e-12:
        return False
    if cfg.use_offsets:
        tol = max(cfg.offset_min_tol_s, cfg.offset_ratio * (r.offset_s - r.onset_s))
        if abs(r.offset_s - e.offset_s) > tol + 1e-12:
            return False
    return True


def match_notes(ref: Sequence[NoteEvent], est: Sequence[NoteEvent],
                cfg: NoteMatchConfig = NoteMatchConfig()) -> list[tuple[int, int]]:
    """Maximum-cardinality one-to-one matching of reference and estimated notes.

    Returns sorted ``(ref_index, est_index)`` pairs.  Among matchings of maximum
    size, the one with the smallest total onset distance is chosen; remaining
    ties fall to input order.
    """
    by_pitch = defaultdict(lambda: ([], []))
    for i, n in enumerate(ref):
        by_pitch[n.pitch][0].append(i)
    for j, n in enumerate(est):
        by_pitch[n.pitch][1].append(j)

    pairs = []
    for ri, ej in by_pitch.values():
        if not ri or not ej:
            continue
        ok = np.array([[admissible(ref[i], est[j], cfg) for j in ej] for i in ri])
        if not ok.any():
            continue
        dist = np.array([[abs(ref[i].onset_s - est[j].onset_s) for j in ej] for i in ri])
        # every admissible distance is <= onset_tol, so this penalty outweighs any
        # total distance and forces maximum cardinality first
        penalty = 1.0 + ok.sum() * (cfg.onset_tol_s + 1.0)
        cost = np.where(ok, dist, penalty)
        rows, cols = linear_sum_assignment(cost)
        pairs.extend((ri[a], ej[b]) for a, b in zip(rows, cols) if ok[a, b])
    return sorted(pairs)


def prf(match_count: int, ref_count: int, est_count: int) -> PRF:
    if match_count > min(ref_count, est_count):
        raise ValueError("more matches than notes")
    p = match_count / est_count if est_count else 0.0
    r = match_count / ref_count if ref_count else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f, match_count, ref_count, est_count)


def score_piece(ref: Sequence[NoteEvent], est: Sequence[NoteEvent],
                cfg: NoteMatchConfig = NoteMatchConfig()) -> PRF:
    return prf(len(match_notes(ref, est, cfg)), len(ref), len(est))


@dataclass(frozen=True)
class CorpusScore:
    precision: float
    recall: float
    f1: float
    pieces: list


def evaluate_corpus(pairs: Sequence[tuple[Sequence[NoteEvent], Sequence[NoteEvent]]],
                    cfg: NoteMatchConfig = NoteMatchConfig()) -> CorpusScore:
    """Per-piece scores, macro-averaged."""
    if not pairs:
        raise ValueError("empty corpus")
    table = [score_piece(ref, est, cfg) for ref, est in pairs]
    return CorpusScore(float(np.mean([s.precision for s in table])),
                       float(np.mean([s.recall for s in table])),
                       float(np.mean([s.f1 for s in table])), table)
