"""Word timing by monotonic forced alignment, with a uniform fallback."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .segmentation import TimedWord

BLANK = -1


class AlignmentError(ValueError):
    """No valid alignment exists (e.g. more symbols than frames)."""


@dataclass(frozen=True)
class EmissionMatrix:
    scores: np.ndarray  # [n_frames, n_symbols] log-probabilities
    hop_seconds: float
    start_time_s: float = 0.0

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ValueError("emission scores must be a [frames x symbols] matrix")
        object.__setattr__(self, "scores", scores)

    @property
    def n_frames(self) -> int:
        return self.scores.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.scores.shape[1]


class AlignedRun(NamedTuple):
    symbol: int  # BLANK for silence runs
    start_frame: int
    end_frame: int  # inclusive


def uniform_align(words: Sequence[str], speech_start_s: float, speech_end_s: float) -> list[TimedWord]:
    """Split the interval into equal consecutive spans, one per word."""
    if not words:
        raise ValueError("no words to align")
    if not speech_end_s > speech_start_s:
        raise ValueError("speech_end_s must exceed speech_start_s")
    n = len(words)
    edges = [speech_start_s + (speech_end_s - speech_start_s) * i / n for i in range(n + 1)]
    edges[-1] = speech_end_s
    return [TimedWord(w, edges[i], edges[i + 1]) for i, w in enumerate(words)]


def viterbi_align(
    em: EmissionMatrix,
    symbol_sequence: Sequence[int],
    allow_blank: bool = True,
    blank_id: Optional[int] = None,
    blank_logprob: float = -5.0,
) -> list[AlignedRun]:
    """Best monotonic assignment of consecutive frame runs to the symbols.

    Every symbol receives at least one frame, in order, and runs cover all
    frames. With ``allow_blank`` optional silence runs may precede, separate
    and follow the symbols; a blank frame scores ``em.scores[:, blank_id]``
    when ``blank_id`` is given and the flat ``blank_logprob`` otherwise.
    Among equally scoring paths the one with the earliest boundaries wins.
    """
    symbols = [int(s) for s in symbol_sequence]
    n_frames, n_sym = em.scores.shape
    if not symbols:
        raise ValueError("empty symbol sequence")
    if any(not 0 <= s < n_sym for s in symbols):
        raise ValueError("symbol id outside the emission matrix")
    if n_frames < len(symbols):
        raise AlignmentError(f"{n_frames} frames cannot hold {len(symbols)} symbols")

    # state layout: blank_0, sym_0, blank_1, ..., sym_{n-1}, blank_n (blanks optional)
    if allow_blank:
        state_sym = []
        for s in symbols:
            state_sym += [BLANK, s]
        state_sym.append(BLANK)
    else:
        state_sym = list(symbols)
    n_states = len(state_sym)
    is_blank = np.array([s == BLANK for s in state_sym])

    if blank_id is not None:
        blank_col = em.scores[:, blank_id]
    else:
        blank_col = np.full(n_frames, float(blank_logprob))
    emit = np.empty((n_frames, n_states))
    for j, s in enumerate(state_sym):
        emit[:, j] = blank_col if s == BLANK else em.scores[:, s]

    neg = -np.inf
    score = np.full((n_frames, n_states), neg)
    # back[t, j]: 0 stay, 1 from j-1, 2 from j-2
    back = np.zeros((n_frames, n_states), dtype=np.int8)
    score[0, 0] = emit[0, 0]
    if allow_blank:
        score[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = score[t - 1]
        stay = prev
        step1 = np.concatenate([[neg], prev[:-1]])
        step2 = np.concatenate([[neg, neg], prev[:-2]])
        if allow_blank:
            # skipping a blank is only legal between two symbol states
            skip_ok = ~is_blank & np.concatenate([[False, False], ~is_blank[:-2]])
            step2 = np.where(skip_ok, step2, neg)
        else:
            step2 = np.full(n_states, neg)
        # ties prefer staying, which moves the boundary earlier
        best = stay.copy()
        choice = np.zeros(n_states, dtype=np.int8)
        better = step1 > best
        best = np.where(better, step1, best)
        choice[better] = 1
        better = step2 > best
        best = np.where(better, step2, best)
        choice[better] = 2
        score[t] = best + emit[t]
        back[t] = choice

    finals = [n_states - 1]
    if allow_blank:
        finals = [n_states - 1, n_states - 2]  # trailing blank first: earlier word end on ties
    end_state = max(finals, key=lambda j: (score[-1, j], j == n_states - 1))
    if not np.isfinite(score[-1, end_state]):
        raise AlignmentError("no finite-scoring alignment")

    path = np.empty(n_frames, dtype=np.int64)
    j = end_state
    for t in range(n_frames - 1, -1, -1):
        path[t] = j
        j -= int(back[t, j])

    runs: list[AlignedRun] = []
    start = 0
    for t in range(1, n_frames + 1):
        if t == n_frames or path[t] != path[t - 1]:
            runs.append(AlignedRun(state_sym[path[start]], start, t - 1))
            start = t
    return runs


def alignment_score(em: EmissionMatrix, runs: Sequence[AlignedRun], blank_id: Optional[int] = None, blank_logprob: float = -5.0) -> float:
    total = 0.0
    for r in runs:
        if r.symbol == BLANK:
            col = em.scores[r.start_frame : r.end_frame + 1, blank_id] if blank_id is not None else None
            total += float(col.sum()) if col is not None else blank_logprob * (r.end_frame - r.start_frame + 1)
        else:
            total += float(em.scores[r.start_frame : r.end_frame + 1, r.symbol].sum())
    return total


def word_timestamps(
    alignment: Sequence[AlignedRun],
    hop_seconds: float,
    start_offset_s: float = 0.0,
    words: Optional[Sequence[str]] = None,
    id_to_word=None,
) -> list[TimedWord]:
    """Convert symbol runs to seconds, dropping blank runs.

    Word strings come from ``words`` (one per non-blank run, in order), or
    from ``id_to_word(symbol)``, or default to the symbol id.
    """
    symbol_runs = [r for r in alignment if r.symbol != BLANK]
    if words is not None and len(words) != len(symbol_runs):
        raise ValueError("one word per aligned symbol run required")
    out = []
    for i, r in enumerate(symbol_runs):
        if words is not None:
            text = words[i]
        elif id_to_word is not None:
            text = id_to_word(r.symbol)
        else:
            text = str(r.symbol)
        out.append(
            TimedWord(text, start_offset_s + r.start_frame * hop_seconds, start_offset_s + (r.end_frame + 1) * hop_seconds)
        )
    return out
