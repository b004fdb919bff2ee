"""Word-level token vocabulary with reserved control ids."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")


class Vocabulary:
    """Dense word ids; the first five ids are PAD, BOS, EOS, UNK, MASK."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if not word or any(c.isspace() for c in word):
            raise ValueError(f"vocabulary entries must be single non-empty words, got {word!r}")
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @classmethod
    def build(cls, transcripts: Iterable[Sequence[str]]) -> "Vocabulary":
        seen = sorted({w for t in transcripts for w in t})
        return cls(seen)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Map ids back to words, stopping at EOS and skipping PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)

    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]
