"""Deterministic toy audio-visual corpus with known word timings.

Every vocabulary word is voiced as a two-tone burst. Ambiguous word pairs
share one burst exactly, so only the frames can tell them apart: each frame
draws a glyph for every word of the sentence nearest in time, in a grid
cell owned by that word.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_features import Waveform, write_wav
from .segmentation import Segment, TimedWord
from .visual_features import GRID, IMAGE_SIZE, N_TOKENS, PATCH, frame_filename, write_ppm

STOPWORDS = ["the", "a", "to", "of", "and", "in", "it", "on", "with", "this", "that", "is"]
CONTENT_WORDS = [
    "knife", "bowl", "onion", "carrot", "pan", "spoon", "table", "door", "cup", "water",
    "plate", "bread", "towel", "drawer", "lid", "oven", "sink", "chair", "window", "box",
    "paint", "brush", "hammer", "nail", "board", "screw", "glove", "bag", "phone", "key",
    "shelf", "lamp", "paper", "tape", "scissors", "bottle", "fridge", "salt", "pepper", "rice",
    "flour", "sugar", "egg", "milk", "butter", "cheese", "apple", "lemon", "garlic", "tomato",
]
TONE_GRID_HZ = np.round(np.geomspace(300.0, 3400.0, 14)).tolist()
SILENCE_RMS = 0.02


@dataclass
class SynthSpec:
    n_utterances: int = 50
    vocab_size: int = 20
    n_stopwords: int = 4
    n_ambiguous_pairs: int = 0
    words_per_sentence: tuple = (2, 4)
    sentences_per_utterance: tuple = (1, 1)
    silence_ratio: float = 0.0
    visual_cue: bool = False
    frames: bool = True
    word_duration_s: tuple = (0.25, 0.40)
    word_gap_s: tuple = (0.05, 0.12)
    sentence_pad_s: float = 0.1
    min_sentence_gap_s: float = 0.3
    edge_silence_s: float = 0.05
    noise_std: float = 0.003
    val_fraction: float = 0.0
    test_fraction: float = 0.0

    def validate(self):
        if self.vocab_size < 1 or self.vocab_size > len(CONTENT_WORDS) + len(STOPWORDS):
            raise ValueError("vocab_size out of range for the built-in word lists")
        if not 0 <= self.n_stopwords <= min(len(STOPWORDS), self.vocab_size):
            raise ValueError("n_stopwords out of range")
        if 2 * self.n_ambiguous_pairs > self.vocab_size - self.n_stopwords:
            raise ValueError("not enough content words for the requested ambiguous pairs")
        if not 0.0 <= self.silence_ratio < 1.0:
            raise ValueError("silence_ratio must lie in [0, 1)")
        if self.visual_cue and not self.frames:
            raise ValueError("visual_cue needs frames")


@dataclass
class CorpusLayout:
    words: list
    signature_of: dict  # word -> signature index
    ambiguous_pairs: list
    cell_of: dict  # word -> grid cell index
    signatures: list = field(default_factory=list)  # waveform per signature
    glyphs: dict = field(default_factory=dict)  # word -> [16, 16, 3] float


def _tone_pairs():
    n = len(TONE_GRID_HZ)
    return [(i, j) for i in range(n) for j in range(i + 2, n)]


def build_layout(spec: SynthSpec, seed: int, sample_rate: int = 16000) -> CorpusLayout:
    spec.validate()
    rng = np.random.default_rng([seed, 1])
    n_content = spec.vocab_size - spec.n_stopwords
    words = STOPWORDS[: spec.n_stopwords] + CONTENT_WORDS[:n_content]
    content = words[spec.n_stopwords :]
    pairs = [(content[2 * k], content[2 * k + 1]) for k in range(spec.n_ambiguous_pairs)]
    signature_of, nxt = {}, 0
    for a, b in pairs:
        signature_of[a] = signature_of[b] = nxt
        nxt += 1
    for w in words:
        if w not in signature_of:
            signature_of[w] = nxt
            nxt += 1
    tone_pairs = _tone_pairs()
    order = rng.permutation(len(tone_pairs))
    lo, hi = spec.word_duration_s
    signatures = []
    for s in range(nxt):
        i, j = tone_pairs[order[s % len(tone_pairs)]]
        dur = lo + (hi - lo) * rng.random()
        n = int(round(dur * sample_rate))
        t = np.arange(n) / sample_rate
        wave_ = 0.2 * np.sin(2 * np.pi * TONE_GRID_HZ[i] * t) + 0.2 * np.sin(2 * np.pi * TONE_GRID_HZ[j] * t)
        ramp = min(n // 2, int(0.01 * sample_rate))
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp, endpoint=False)
        env[n - ramp :] = np.linspace(1.0, 0.0, ramp)
        signatures.append(wave_ * env)
    cells = rng.permutation(N_TOKENS)
    cell_of = {w: int(cells[k]) for k, w in enumerate(words)}
    glyphs = {w: (rng.random((PATCH, PATCH, 3)) > 0.5).astype(np.float32) * 0.9 + 0.05 for w in words}
    return CorpusLayout(words, signature_of, pairs, cell_of, signatures, glyphs)


def _sample_sentence(rng, layout: CorpusLayout, spec: SynthSpec) -> list[str]:
    n = int(rng.integers(spec.words_per_sentence[0], spec.words_per_sentence[1] + 1))
    partner = {}
    for a, b in layout.ambiguous_pairs:
        partner[a], partner[b] = b, a
    out: list[str] = []
    while len(out) < n:
        w = layout.words[int(rng.integers(len(layout.words)))]
        # one member per ambiguous pair per sentence, so the glyphs stay decisive
        if w in partner and partner[w] in out:
            continue
        out.append(w)
    return out


def _render_frame(layout: CorpusLayout, visible: list[str], rng) -> np.ndarray:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 0.15, dtype=np.float32)
    img += rng.normal(0.0, 0.02, img.shape).astype(np.float32)
    for w in visible:
        r, c = divmod(layout.cell_of[w], GRID)
        img[r * PATCH : (r + 1) * PATCH, c * PATCH : (c + 1) * PATCH] = layout.glyphs[w]
    return np.clip(img, 0.0, 1.0)


def _place_silence(rng, spec: SynthSpec, speech_s: float, n_sentences: int, mandatory_gaps: float):
    """Split the silence budget into leading, between-sentence and trailing pauses."""
    slots = n_sentences + 1
    floors = np.array([spec.edge_silence_s] + [spec.min_sentence_gap_s] * (n_sentences - 1) + [spec.edge_silence_s])
    target = spec.silence_ratio / (1.0 - spec.silence_ratio) * speech_s if spec.silence_ratio > 0 else 0.0
    extra = max(0.0, target - mandatory_gaps - floors.sum())
    return floors + extra * rng.dirichlet(np.ones(slots))


def make_utterance(layout: CorpusLayout, spec: SynthSpec, rng, sample_rate: int = 16000):
    n_sent = int(rng.integers(spec.sentences_per_utterance[0], spec.sentences_per_utterance[1] + 1))
    sentences = [_sample_sentence(rng, layout, spec) for _ in range(n_sent)]
    gaps = [[float(rng.uniform(*spec.word_gap_s)) for _ in s[:-1]] for s in sentences]
    speech = sum(len(layout.signatures[layout.signature_of[w]]) / sample_rate for s in sentences for w in s)
    pauses = _place_silence(rng, spec, speech, n_sent, sum(map(sum, gaps)))

    pieces, timings, seg_bounds = [], [], []
    t = 0

    def emit_silence(seconds):
        nonlocal t
        n = int(round(seconds * sample_rate))
        pieces.append(np.zeros(n))
        t += n

    for k, sent in enumerate(sentences):
        emit_silence(pauses[k])
        first = len(timings)
        for i, w in enumerate(sent):
            sig = layout.signatures[layout.signature_of[w]]
            timings.append(TimedWord(w, t / sample_rate, (t + len(sig)) / sample_rate))
            pieces.append(sig)
            t += len(sig)
            if i < len(sent) - 1:
                emit_silence(gaps[k][i])
        seg_bounds.append((timings[first].start_s, timings[-1].end_s, timings[first:]))
    emit_silence(pauses[-1])
    audio = np.concatenate(pieces)
    audio = audio + rng.normal(0.0, spec.noise_std, len(audio))
    duration = len(audio) / sample_rate

    segments = []
    for i, (a, b, words) in enumerate(seg_bounds):
        lo = max(0.0, a - spec.sentence_pad_s)
        hi = min(duration, b + spec.sentence_pad_s)
        if i > 0:
            lo = max(lo, 0.5 * (seg_bounds[i - 1][1] + a))
        if i + 1 < len(seg_bounds):
            hi = min(hi, 0.5 * (b + seg_bounds[i + 1][0]))
        segments.append(Segment(lo, hi, tuple(words)))
    return Waveform(audio, sample_rate), timings, segments


def frame_times(duration_s: float) -> list[float]:
    return [float(t) for t in range(int(math.ceil(duration_s)))] or [0.0]


def visible_words(segments: list[Segment], t: float) -> list[str]:
    """Words of the sentence segment closest to time ``t``."""
    def dist(s):
        return 0.0 if s.start_s <= t < s.end_s else min(abs(t - s.start_s), abs(t - s.end_s))

    best = min(segments, key=dist)
    return best.transcript


def make_synthetic_corpus(spec: SynthSpec, out_dir, seed: int = 0) -> dict:
    """Write WAVs, PPM frames and ``manifest.json`` under ``out_dir``; return the manifest."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    layout = build_layout(spec, seed)
    rng = np.random.default_rng([seed, 2])
    n = spec.n_utterances
    n_test = int(round(spec.test_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    utterances = []
    for u in range(n):
        uid = f"utt{u:04d}"
        wav, timings, segments = make_utterance(layout, spec, rng)
        write_wav(out / "audio" / f"{uid}.wav", wav)
        split = "test" if u >= n - n_test else "val" if u >= n - n_test - n_val else "train"
        entry = {
            "id": uid,
            "wav_path": f"audio/{uid}.wav",
            "transcript": " ".join(w.word for w in timings),
            "segments": [s.to_json() for s in segments],
            "word_timings": [w.to_json() for w in timings],
            "split": split,
        }
        if spec.frames:
            fdir = out / "frames" / uid
            fdir.mkdir(parents=True, exist_ok=True)
            frng = np.random.default_rng([seed, 3, u])
            entry["frames_dir"] = f"frames/{uid}"
            entry["frames"] = []
            for ft in frame_times(wav.duration_seconds):
                shown = visible_words(segments, ft) if spec.visual_cue else []
                name = frame_filename(ft)
                write_ppm(fdir / name, _render_frame(layout, shown, frng))
                entry["frames"].append({"path": f"frames/{uid}/{name}", "time_s": ft})
        utterances.append(entry)
    manifest = {
        "utterances": utterances,
        "vocabulary": layout.words,
        "ambiguous_pairs": [list(p) for p in layout.ambiguous_pairs],
        "synth": {**asdict(spec), "seed": seed},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def silent_fraction(w: Waveform, frame_s: float = 0.01, threshold: float = SILENCE_RMS) -> float:
    """Share of 10 ms frames whose RMS falls below ``threshold``."""
    n = int(round(frame_s * w.sample_rate_hz))
    k = len(w.samples) // n
    if k == 0:
        return 1.0
    frames = np.asarray(w.samples[: k * n]).reshape(k, n)
    rms = np.sqrt((frames ** 2).mean(axis=1))
    return float((rms < threshold).mean())
