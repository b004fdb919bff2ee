"""Manifest ingestion, training-set construction, training, untrimmed
transcription and corpus-level evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import tensor_core as tc
from .aligner import AlignmentError, EmissionMatrix, uniform_align, viterbi_align, word_timestamps
from .audio_features import FeatureConfig, Waveform, log_mel_spectrogram, read_wav
from .evaluation import WerBreakdown, timestamped_eval, wer
from .masking import MaskingConfig, default_stopwords
from .segmentation import Segment, TimedWord, assign_words, fixed_segments
from .transcriber import (
    AVTranscriber,
    ClipExample,
    FramePool,
    ModelConfig,
    Trainer,
    collate,
    forward_encoder,
)
from .visual_features import list_frames, read_ppm
from .vocab import PAD, Vocabulary

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    wav_path: Path
    split: str = "train"
    frames_dir: Optional[Path] = None
    frames: Optional[list] = None  # [(time_s, path)]
    transcript: Optional[list] = None
    segments: Optional[list] = None
    word_timings: Optional[list] = None


@dataclass
class Manifest:
    utterances: list
    root: Path = Path(".")
    extra: dict = field(default_factory=dict)

    def split(self, name: Optional[str]) -> list:
        return [u for u in self.utterances if name is None or u.split == name]

    def by_id(self, uid: str) -> Utterance:
        for u in self.utterances:
            if u.id == uid:
                return u
        raise KeyError(uid)


def load_manifest(path) -> Manifest:
    path = Path(path)
    data = json.loads(path.read_text())
    root = path.parent
    entries = data["utterances"] if isinstance(data, dict) else data
    seen = set()
    utts = []
    for e in entries:
        uid = e.get("id")
        if not uid:
            raise ManifestError("utterance without an id")
        if uid in seen:
            raise ManifestError(f"{uid}: duplicate utterance id")
        seen.add(uid)
        if "wav_path" not in e:
            raise ManifestError(f"{uid}: missing wav_path")
        wav = root / e["wav_path"]
        if not wav.exists():
            raise ManifestError(f"{uid}: audio file not found: {wav}")
        split = e.get("split", "train")
        if split not in SPLITS:
            raise ManifestError(f"{uid}: unknown split {split!r}")
        frames = None
        if e.get("frames"):
            frames = [(float(f["time_s"]), root / f["path"]) for f in e["frames"]]
        frames_dir = root / e["frames_dir"] if e.get("frames_dir") else None
        if frames_dir is not None and not frames_dir.is_dir():
            raise ManifestError(f"{uid}: frames_dir not found: {frames_dir}")
        transcript = e.get("transcript")
        if isinstance(transcript, str):
            transcript = transcript.split()
        timings = None
        if e.get("word_timings") is not None:
            timings = [TimedWord.from_json(w) for w in e["word_timings"]]
            starts = [w.start_s for w in timings]
            if any(b < a for a, b in zip(starts, starts[1:])):
                raise ManifestError(f"{uid}: word_timings are not sorted")
        segments = None
        if e.get("segments") is not None:
            segments = [Segment.from_json(s) for s in e["segments"]]
        utts.append(Utterance(uid, wav, split, frames_dir, frames, transcript, segments, timings))
    extra = {k: v for k, v in data.items() if k != "utterances"} if isinstance(data, dict) else {}
    return Manifest(utts, root, extra)


@dataclass
class PipelineConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: dict = field(default_factory=dict)  # ModelConfig fields except vocab_size
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    optim: tc.OptimConfig = field(default_factory=tc.OptimConfig)
    chunk_s: float = 20.0
    seed: int = 0
    steps: int = 1000
    batch_size: int = 8

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        masking = dict(d.get("masking", {}))
        if "stopword_list" in masking:
            masking["stopword_list"] = frozenset(masking["stopword_list"])
        optim = dict(d.get("optim", {}))
        if "betas" in optim:
            optim["betas"] = tuple(optim["betas"])
        return cls(
            features=FeatureConfig(**d.get("features", {})),
            model=dict(d.get("model", {})),
            masking=MaskingConfig(**masking),
            optim=tc.OptimConfig(**optim),
            chunk_s=float(d.get("chunk_s", 20.0)),
            seed=int(d.get("seed", 0)),
            steps=int(d.get("steps", 1000)),
            batch_size=int(d.get("batch_size", 8)),
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        masking = {"strategy": self.masking.strategy, "mask_rate": self.masking.mask_rate}
        if self.masking.stopword_list != default_stopwords():
            masking["stopword_list"] = sorted(self.masking.stopword_list)
        return {
            "features": dataclasses.asdict(self.features),
            "model": dict(self.model),
            "masking": masking,
            "optim": dataclasses.asdict(self.optim),
            "chunk_s": self.chunk_s,
            "seed": self.seed,
            "steps": self.steps,
            "batch_size": self.batch_size,
        }


# -- loading media ------------------------------------------------------------


def load_frame_pool(utt: Utterance) -> Optional[FramePool]:
    if utt.frames:
        listing = sorted(utt.frames)
    elif utt.frames_dir is not None:
        listing = list_frames(utt.frames_dir)
    else:
        return None
    if not listing:
        return None
    times = np.array([t for t, _ in listing])
    pixels = np.stack([read_ppm(p) for _, p in listing])
    return FramePool(times, pixels)


def clip_example(
    wav: Waveform,
    start_s: float,
    end_s: float,
    words: Sequence[TimedWord],
    fcfg: FeatureConfig,
    frames: Optional[FramePool] = None,
    utterance_id: str = "",
) -> ClipExample:
    piece = wav.slice(start_s, end_s)
    if len(piece.samples) == 0:
        piece = Waveform(np.zeros(1), wav.sample_rate_hz)
    spec = log_mel_spectrogram(piece, fcfg, start_time_s=start_s)
    return ClipExample(spec, tuple(words), frames, start_s, end_s, utterance_id)


def _word_timings(utt: Utterance) -> list[TimedWord]:
    """Provided timings, else uniform timings inside each reference segment."""
    if utt.word_timings is not None:
        return list(utt.word_timings)
    if utt.segments and all(s.words is not None for s in utt.segments):
        out = []
        for s in utt.segments:
            out += list(s.words)
        return out
    if utt.segments and utt.transcript is not None:
        raise ManifestError(f"{utt.id}: segments without per-segment words cannot be aligned")
    if utt.transcript is not None:
        dur = read_wav(utt.wav_path).duration_seconds
        return uniform_align(utt.transcript, 0.0, dur) if utt.transcript else []
    raise ManifestError(f"{utt.id}: fixed segmentation needs word_timings or a transcript")


def build_training_set(
    manifest: Manifest,
    cfg: PipelineConfig,
    scheme: str = "fixed_segments",
    split: Optional[str] = "train",
    with_frames: bool = True,
) -> list[ClipExample]:
    """Cut utterances into training clips under a segmentation scheme.

    ``gt_segments`` makes one clip per provided segment. ``fixed_segments``
    chunks each utterance every ``cfg.chunk_s`` seconds and routes its timed
    words into chunks by midpoint.
    """
    scheme = {"gt": "gt_segments", "fixed": "fixed_segments"}.get(scheme, scheme)
    if scheme not in ("gt_segments", "fixed_segments"):
        raise ValueError(f"unknown segmentation scheme {scheme!r}")
    examples = []
    for utt in manifest.split(split):
        wav = read_wav(utt.wav_path)
        frames = load_frame_pool(utt) if with_frames else None
        if scheme == "gt_segments":
            if not utt.segments:
                raise ManifestError(f"{utt.id}: gt_segments requires per-utterance segments")
            segs = utt.segments
            if any(s.words is None for s in segs):
                segs = assign_words(_word_timings(utt), [Segment(s.start_s, s.end_s) for s in segs])
        else:
            segs = assign_words(_word_timings(utt), fixed_segments(wav.duration_seconds, cfg.chunk_s))
        for s in segs:
            examples.append(clip_example(wav, s.start_s, s.end_s, s.words or (), cfg.features, frames, utt.id))
    return examples


def train_model(
    examples: Sequence[ClipExample],
    vocab: Vocabulary,
    cfg: PipelineConfig,
    steps: Optional[int] = None,
    log_every: int = 0,
) -> tuple[AVTranscriber, list[float]]:
    """Minibatch training with a seeded shuffle; returns the model and per-step losses."""
    if not examples:
        raise ValueError("no training examples")
    steps = cfg.steps if steps is None else steps
    torch.manual_seed(cfg.seed)
    model = AVTranscriber(cfg.model_config(len(vocab)), seed=cfg.seed)
    trainer = Trainer(model, vocab, cfg.optim)
    rng = np.random.default_rng([cfg.seed, 7])
    order: list[int] = []
    losses = []
    bs = min(cfg.batch_size, len(examples))
    for step in range(steps):
        if len(order) < bs:
            order += list(rng.permutation(len(examples)))
        idx, order = order[:bs], order[bs:]
        loss = trainer.train_step([examples[i] for i in idx], cfg.masking, rng_seed=int(rng.integers(2**31)))
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f", step + 1, loss)
    model.eval()
    return model, losses


# -- inference --------------------------------------------------------------------


@torch.no_grad()
def transcribe_clip(model: AVTranscriber, vocab: Vocabulary, ex: ClipExample, align: bool = True) -> list[TimedWord]:
    """Decode one clip and time its words inside the clip."""
    model.eval()
    batch = collate(model, [ex], vocab, train=False)
    enc = forward_encoder(model, batch)
    ids = model.decode_greedy(enc, model.cfg.max_text_len)[0]
    words = vocab.decode(ids)
    if not words:
        return []
    symbols = vocab.encode(words)
    start, end = ex.clip_start_s, ex.clip_end_s
    hop = ex.spectrogram.hop_seconds * model.cfg.frames_per_token
    timed = None
    if align and model.cfg.align_loss_weight > 0:
        em = EmissionMatrix(model.alignment_logprobs(enc)[0].double().numpy(), hop, start)
        try:
            runs = viterbi_align(em, symbols, allow_blank=True, blank_id=PAD)
            timed = word_timestamps(runs, hop, start, words=words)
        except AlignmentError:
            timed = None
    if timed is None:
        timed = uniform_align(words, start, end)
    return [TimedWord(w.word, min(w.start_s, end), min(w.end_s, end)) for w in timed]


def transcribe_untrimmed(
    wav: Waveform,
    frames: Optional[FramePool],
    model: AVTranscriber,
    vocab: Vocabulary,
    cfg: PipelineConfig,
    utterance_id: str = "",
) -> list[TimedWord]:
    """Chunk, decode each chunk independently, align, shift to recording time."""
    if model.cfg.modality == "audio_visual" and frames is None:
        raise ValueError(f"{utterance_id or 'input'}: audio_visual model needs frames")
    win = cfg.features.window_samples(wav.sample_rate_hz) / wav.sample_rate_hz
    out: list[TimedWord] = []
    for seg in fixed_segments(wav.duration_seconds, cfg.chunk_s):
        if seg.duration_s < win:
            log.warning("%s: skipping %.4f s tail chunk shorter than one window", utterance_id, seg.duration_s)
            continue
        ex = clip_example(wav, seg.start_s, seg.end_s, (), cfg.features, frames, utterance_id)
        out += transcribe_clip(model, vocab, ex)
    out.sort(key=lambda w: (w.start_s, w.end_s))
    return out


def fixed_chunk_wer(model: AVTranscriber, vocab: Vocabulary, examples: Sequence[ClipExample]) -> WerBreakdown:
    """Chunk-level WER: each clip's decoded words against its routed reference words."""
    total = WerBreakdown()
    for ex in examples:
        hyp = [w.word for w in transcribe_clip(model, vocab, ex, align=False)]
        ref = ex.transcript
        total = total + (wer(ref, hyp) if ref else WerBreakdown(insertions=len(hyp)))
    return total


def reference_segments(utt: Utterance) -> list[Segment]:
    """Reference segments for evaluation, falling back to one whole-recording segment."""
    if utt.segments and all(s.words is not None for s in utt.segments):
        return list(utt.segments)
    if utt.word_timings is not None:
        dur = read_wav(utt.wav_path).duration_seconds
        return [Segment(0.0, max(dur, 1e-9), tuple(utt.word_timings))]
    raise ManifestError(f"{utt.id}: no reference words for evaluation")


def evaluate_predictions(predictions: dict, manifest: Manifest, split: Optional[str] = None) -> WerBreakdown:
    total = WerBreakdown()
    per = []
    for utt in manifest.split(split):
        if utt.id not in predictions and split is None:
            continue
        br = timestamped_eval(predictions.get(utt.id, []), reference_segments(utt), utt.id)
        per += br.per_utterance
        total = total + WerBreakdown(br.substitutions, br.deletions, br.insertions, br.n_reference_words)
    total.per_utterance = per
    return total


# -- prediction files ------------------------------------------------------------


def write_predictions(path, predictions: dict) -> None:
    lines = []
    for uid in sorted(predictions):
        for w in predictions[uid]:
            lines.append(json.dumps({"utterance_id": uid, **w.to_json()}))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_predictions(path) -> dict:
    out: dict = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.setdefault(d.get("utterance_id", ""), []).append(TimedWord.from_json(d))
    for words in out.values():
        words.sort(key=lambda w: (w.start_s, w.end_s))
    return out
