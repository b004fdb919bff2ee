"""Text normalization, word error rate, and time-routed evaluation."""

from __future__ import annotations

import bisect
import re
from dataclasses import dataclass, field
from typing import Sequence

from .segmentation import Segment, TimedWord

_APOSTROPHES = str.maketrans({"’": "'", "‘": "'"})


class UndefinedReferenceError(ValueError):
    """WER is undefined for an empty reference with a non-empty hypothesis."""


@dataclass
class WerBreakdown:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_reference_words: int = 0
    per_utterance: list = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer_percent(self) -> float:
        if self.n_reference_words == 0:
            if self.errors:
                raise UndefinedReferenceError("no reference words but the hypothesis is non-empty")
            return 0.0
        return 100.0 * self.errors / self.n_reference_words

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.n_reference_words + other.n_reference_words,
            self.per_utterance + other.per_utterance,
        )

    def to_json(self) -> dict:
        return {
            "wer_percent": self.wer_percent,
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "n_reference_words": self.n_reference_words,
            "per_utterance": self.per_utterance,
        }


def normalize_text(s: str) -> list[str]:
    """Lowercase, strip punctuation (keeping apostrophes inside words), split."""
    s = s.translate(_APOSTROPHES).lower()
    s = re.sub(r"[^\w\s']", " ", s)
    s = s.replace("_", " ")
    s = re.sub(r"(?<!\w)'|'(?!\w)", " ", s)
    return s.split()


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WerBreakdown:
    """Levenshtein alignment at unit costs.

    The backtrace prefers substitution (or match), then deletion, then
    insertion, so counts are deterministic when several paths tie.
    """
    n, m = len(ref), len(hyp)
    if n == 0:
        if m:
            raise UndefinedReferenceError("empty reference with a non-empty hypothesis")
        return WerBreakdown()
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, up = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j - 1] + (ri != hyp[j - 1]), up[j] + 1, row[j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(s, dl, ins, n)


def _counts(ref, hyp) -> WerBreakdown:
    # an empty reference segment turns every routed word into an insertion
    if not ref:
        return WerBreakdown(0, 0, len(hyp), 0)
    return wer(ref, hyp)


def timestamped_eval(pred: Sequence[TimedWord], refs: Sequence[Segment], utterance_id: str = "") -> WerBreakdown:
    """Route predicted words to reference segments by midpoint, then score per segment.

    Words whose midpoint falls outside every reference segment are insertions.
    """
    refs = sorted(refs, key=lambda s: s.start_s)
    for a, b in zip(refs, refs[1:]):
        if b.start_s < a.end_s:
            raise ValueError(f"reference segments overlap: [{a.start_s}, {a.end_s}) and [{b.start_s}, {b.end_s})")
    starts = [s.start_s for s in refs]
    routed: list[list[TimedWord]] = [[] for _ in refs]
    stray = 0
    for w in pred:
        i = bisect.bisect_right(starts, w.midpoint) - 1
        if i >= 0 and refs[i].contains(w.midpoint):
            routed[i].append(w)
        else:
            stray += 1
    total = WerBreakdown(insertions=stray)
    for seg, words in zip(refs, routed):
        words = sorted(words, key=lambda w: (w.start_s, w.end_s))
        total = total + _counts(seg.transcript, [w.word for w in words])
    total.per_utterance = [
        {
            "utterance_id": utterance_id,
            "substitutions": total.substitutions,
            "deletions": total.deletions,
            "insertions": total.insertions,
            "n_reference_words": total.n_reference_words,
        }
    ]
    return total
