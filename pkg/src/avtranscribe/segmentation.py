"""Fixed-length chunking of recordings and routing of timed words into chunks."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence


@dataclass(frozen=True)
class TimedWord:
    word: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.end_s < self.start_s:
            raise ValueError(f"word {self.word!r} ends before it starts ({self.start_s}, {self.end_s})")
        if not self.word.strip():
            raise ValueError("timed word must be non-empty")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.start_s + self.end_s)

    def shifted(self, offset_s: float) -> "TimedWord":
        return TimedWord(self.word, self.start_s + offset_s, self.end_s + offset_s)

    def to_json(self) -> dict:
        return {"word": self.word, "start_s": self.start_s, "end_s": self.end_s}

    @classmethod
    def from_json(cls, d: dict) -> "TimedWord":
        return cls(str(d["word"]), float(d["start_s"]), float(d["end_s"]))


@dataclass(frozen=True)
class Segment:
    start_s: float
    end_s: float
    words: Optional[tuple] = field(default=None)

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise ValueError(f"invalid segment [{self.start_s}, {self.end_s})")
        if self.words is not None:
            object.__setattr__(self, "words", tuple(self.words))

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    @property
    def transcript(self) -> list[str]:
        return [w.word for w in self.words or ()]

    def contains(self, t: float) -> bool:
        return self.start_s <= t < self.end_s

    def to_json(self) -> dict:
        return {
            "start_s": self.start_s,
            "end_s": self.end_s,
            "words": [w.to_json() for w in self.words or ()],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Segment":
        words = d.get("words")
        return cls(
            float(d["start_s"]),
            float(d["end_s"]),
            None if words is None else tuple(TimedWord.from_json(w) for w in words),
        )


def fixed_segments(duration_s: float, chunk_s: float = 20.0) -> list[Segment]:
    """Tile ``[0, duration_s)`` with half-open chunks; the last one is truncated."""
    if duration_s < 0:
        raise ValueError("duration must be non-negative")
    if chunk_s <= 0:
        raise ValueError("chunk length must be positive")
    out = []
    k = 0
    while k * chunk_s < duration_s:
        out.append(Segment(k * chunk_s, min((k + 1) * chunk_s, duration_s)))
        k += 1
    return out


def assign_words(words: Sequence[TimedWord], segments: Sequence[Segment]) -> list[Segment]:
    """Attach every word to the segment holding its midpoint.

    Segments are half-open, so a midpoint sitting on a boundary goes to the
    later segment. Midpoints at or beyond the final end go to the last segment.
    """
    starts = [w.start_s for w in words]
    if any(b < a for a, b in zip(starts, starts[1:])):
        raise ValueError("words must be sorted by start time")
    if not segments:
        if words:
            raise ValueError("cannot assign words to an empty segment list")
        return []
    bounds = [s.start_s for s in segments]
    buckets: list[list[TimedWord]] = [[] for _ in segments]
    for w in words:
        i = bisect.bisect_right(bounds, w.midpoint) - 1
        buckets[max(0, min(i, len(segments) - 1))].append(w)
    return [Segment(s.start_s, s.end_s, tuple(b)) for s, b in zip(segments, buckets)]


def segments_to_json(segments: Sequence[Segment]) -> str:
    return json.dumps([s.to_json() for s in segments], indent=2)


def segments_from_json(text: str) -> list[Segment]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [Segment.from_json(d) for d in data]
