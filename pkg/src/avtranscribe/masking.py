"""Choosing which spoken words to blank out of the audio during training."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

from .segmentation import TimedWord

STRATEGIES = ("none", "random_word", "content_word")


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset:
    text = resources.files("avtranscribe").joinpath("data/stopwords_v1.txt").read_text(encoding="utf-8")
    return frozenset(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


@dataclass(frozen=True)
class MaskingConfig:
    strategy: str = "none"
    mask_rate: float = 0.15
    stopword_list: frozenset = field(default_factory=default_stopwords)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")
        object.__setattr__(self, "stopword_list", frozenset(self.stopword_list))


def select_mask_words(
    words: Sequence[TimedWord],
    mcfg: MaskingConfig,
    rng_seed: int | np.random.Generator | None = 0,
) -> list[tuple[float, float]]:
    """Time spans of the words picked for masking.

    ``random_word`` draws every word with probability ``mask_rate``;
    ``content_word`` does the same but never considers stopwords. One uniform
    draw is consumed per word regardless of eligibility, so the choice for a
    given word does not depend on its neighbours' eligibility.
    """
    if mcfg.strategy == "none" or mcfg.mask_rate <= 0.0 or not words:
        return []
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    draws = rng.random(len(words))
    spans = []
    for w, u in zip(words, draws):
        if mcfg.strategy == "content_word" and w.word.lower() in mcfg.stopword_list:
            continue
        if u < mcfg.mask_rate:
            spans.append((w.start_s, w.end_s))
    return spans
