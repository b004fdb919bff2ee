"""Audio-visual encoder-decoder transcriber.

Spectrogram frames are grouped four at a time into audio tokens, RGB frame
pairs become 196 tubelet tokens. Each modality runs its own transformer
stack; from ``fusion_start_layer`` on, the stacks exchange information only
through a handful of shared bottleneck tokens. A causal transformer decoder
cross-attends over everything the encoder produced, and a small per-token
classifier on the audio stream supplies emissions for forced alignment.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import tensor_core as tc
from .audio_features import Spectrogram, mask_spans
from .masking import MaskingConfig, select_mask_words
from .segmentation import TimedWord
from .visual_features import FrameStack, N_TOKENS, TOKEN_DIM, sample_frames, tubelet_tokenize
from .vocab import BOS, EOS, PAD, UNK, Vocabulary

MODALITIES = ("audio_only", "audio_visual")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    encoder_layers: int = 6
    fusion_start_layer: int = 4
    n_bottleneck_tokens: int = 4
    encoder_heads: int = 4
    decoder_layers: int = 8
    decoder_heads: int = 4
    max_audio_tokens: int = 512
    max_text_len: int = 64
    modality: str = "audio_visual"
    n_mels: int = 80
    frames_per_token: int = 4
    ffn_mult: int = 4
    align_loss_weight: float = 0.5

    def __post_init__(self):
        if self.modality == "audio":
            self.modality = "audio_only"
        self.validate()

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        # encoder_layers + 1 switches fusion off entirely
        if not 1 <= self.fusion_start_layer <= self.encoder_layers + 1:
            raise ValueError("fusion_start_layer must lie in [1, encoder_layers + 1]")
        if self.n_bottleneck_tokens < 0:
            raise ValueError("n_bottleneck_tokens must be >= 0")
        for heads in (self.encoder_heads, self.decoder_heads):
            if self.d_model % heads:
                raise ValueError(f"d_model={self.d_model} is not divisible by {heads} heads")
        if self.vocab_size <= EOS:
            raise ValueError("vocab_size must cover the reserved ids")

    @property
    def fused_layers(self) -> range:
        """0-based indices of encoder layers that share bottleneck tokens."""
        if self.n_bottleneck_tokens == 0:
            return range(0)
        return range(self.fusion_start_layer - 1, self.encoder_layers)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


class EncoderOutput(NamedTuple):
    audio: torch.Tensor  # [B, T_a, d]
    visual: Optional[torch.Tensor]  # [B, 196, d]
    bottleneck: Optional[torch.Tensor]  # [B, n_b, d]
    audio_padding: torch.Tensor  # [B, T_a] bool, True = padding

    def memory(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Decoder memory ``[audio ; visual ; bottlenecks]`` and its padding mask."""
        parts, masks = [self.audio], [self.audio_padding]
        for extra in (self.visual, self.bottleneck):
            if extra is not None:
                parts.append(extra)
                masks.append(torch.zeros(extra.shape[:2], dtype=torch.bool, device=extra.device))
        return torch.cat(parts, dim=1), torch.cat(masks, dim=1)


class EncoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, ffn_mult):
        super().__init__()
        self.norm1 = tc.LayerNorm(d_model)
        self.attn = tc.MultiHeadAttention(d_model, n_heads)
        self.norm2 = tc.LayerNorm(d_model)
        self.ffn = tc.FeedForward(d_model, ffn_mult)

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, key_padding_mask=key_padding_mask)
        return x + self.ffn(self.norm2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, ffn_mult):
        super().__init__()
        self.norm1 = tc.LayerNorm(d_model)
        self.self_attn = tc.MultiHeadAttention(d_model, n_heads)
        self.norm2 = tc.LayerNorm(d_model)
        self.cross_attn = tc.MultiHeadAttention(d_model, n_heads)
        self.norm3 = tc.LayerNorm(d_model)
        self.ffn = tc.FeedForward(d_model, ffn_mult)

    def forward(self, y, memory, memory_padding):
        h = self.norm1(y)
        y = y + self.self_attn(h, h, causal=True)
        y = y + self.cross_attn(self.norm2(y), memory, key_padding_mask=memory_padding)
        return y + self.ffn(self.norm3(y))


class AVTranscriber(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.audio_proj = tc.Linear(cfg.n_mels * cfg.frames_per_token, d)
        self.audio_norm = tc.LayerNorm(d)
        self.audio_pos = nn.Parameter(torch.empty(cfg.max_audio_tokens, d))
        self.audio_layers = nn.ModuleList(
            EncoderBlock(d, cfg.encoder_heads, cfg.ffn_mult) for _ in range(cfg.encoder_layers)
        )
        self.audio_out_norm = tc.LayerNorm(d)
        if cfg.modality == "audio_visual":
            self.visual_proj = tc.Linear(TOKEN_DIM, d)
            self.visual_norm = tc.LayerNorm(d)
            self.visual_pos = nn.Parameter(torch.empty(N_TOKENS, d))
            self.visual_layers = nn.ModuleList(
                EncoderBlock(d, cfg.encoder_heads, cfg.ffn_mult) for _ in range(cfg.encoder_layers)
            )
            self.visual_out_norm = tc.LayerNorm(d)
        if len(cfg.fused_layers):
            self.bottleneck_init = nn.Parameter(torch.empty(cfg.n_bottleneck_tokens, d))
            self.bottleneck_out_norm = tc.LayerNorm(d)
        self.token_embed = nn.Parameter(torch.empty(cfg.vocab_size, d))
        self.text_pos = nn.Parameter(torch.empty(cfg.max_text_len, d))
        self.decoder_layers = nn.ModuleList(
            DecoderBlock(d, cfg.decoder_heads, cfg.ffn_mult) for _ in range(cfg.decoder_layers)
        )
        self.decoder_out_norm = tc.LayerNorm(d)
        self.lm_head = tc.Linear(d, cfg.vocab_size)
        self.align_head = tc.Linear(d, cfg.vocab_size)
        tc.init_parameters(self, torch.Generator().manual_seed(seed))

    @property
    def dtype(self):
        return self.token_embed.dtype

    # -- embeddings ---------------------------------------------------------

    def audio_token_count(self, n_frames: int) -> int:
        return -(-n_frames // self.cfg.frames_per_token)

    def group_frames(self, spec_values: np.ndarray) -> np.ndarray:
        """Flatten non-overlapping groups of frames, zero-padding the last group."""
        n, m = spec_values.shape
        k = self.cfg.frames_per_token
        t = self.audio_token_count(n)
        padded = np.zeros((t * k, m), dtype=np.float64)
        padded[:n] = spec_values
        return padded.reshape(t, k * m)

    def embed_audio(self, grouped: torch.Tensor) -> torch.Tensor:
        """``[B, T_a, frames_per_token * n_mels]`` -> ``[B, T_a, d_model]``."""
        t = grouped.shape[-2]
        if t == 0:
            raise ValueError("empty spectrogram")
        if t > self.cfg.max_audio_tokens:
            raise ValueError(f"{t} audio tokens exceed max_audio_tokens={self.cfg.max_audio_tokens}")
        return self.audio_norm(self.audio_proj(grouped)) + self.audio_pos[:t]

    def embed_spectrogram(self, spec: Spectrogram) -> torch.Tensor:
        """Single-clip convenience wrapper returning ``[T_a, d_model]``."""
        if spec.n_frames == 0:
            raise ValueError("empty spectrogram")
        grouped = torch.as_tensor(self.group_frames(spec.values), dtype=self.dtype)
        return self.embed_audio(grouped[None])[0]

    def embed_visual(self, tubelets: torch.Tensor) -> torch.Tensor:
        return self.visual_norm(self.visual_proj(tubelets)) + self.visual_pos

    # -- encoder ------------------------------------------------------------

    def encode(self, audio_tokens, visual_tokens=None, audio_padding=None) -> EncoderOutput:
        """Run the modality stacks; fused layers swap information via bottlenecks."""
        cfg = self.cfg
        if (visual_tokens is not None) != (cfg.modality == "audio_visual"):
            raise ValueError(f"visual tokens must be given iff modality is audio_visual (got {cfg.modality})")
        if audio_tokens.shape[-1] != cfg.d_model:
            raise ValueError("audio token width must equal d_model")
        batch = audio_tokens.shape[0]
        if audio_padding is None:
            audio_padding = torch.zeros(audio_tokens.shape[:2], dtype=torch.bool)
        streams = [(audio_tokens, audio_padding, self.audio_layers)]
        if visual_tokens is not None:
            if visual_tokens.shape[-1] != cfg.d_model:
                raise ValueError("visual token width must equal d_model")
            vis_pad = torch.zeros(visual_tokens.shape[:2], dtype=torch.bool)
            streams.append((visual_tokens, vis_pad, self.visual_layers))
        xs = [s[0] for s in streams]
        fused = set(cfg.fused_layers)
        bottleneck = None
        if fused:
            bottleneck = self.bottleneck_init.expand(batch, -1, -1)
            bn_pad = torch.zeros(batch, cfg.n_bottleneck_tokens, dtype=torch.bool)
        for layer in range(cfg.encoder_layers):
            if layer not in fused:
                xs = [blocks[layer](x, pad) for x, (_, pad, blocks) in zip(xs, streams)]
                continue
            updates = []
            new_xs = []
            for x, (_, pad, blocks) in zip(xs, streams):
                n = x.shape[1]
                z = blocks[layer](torch.cat([x, bottleneck], 1), torch.cat([pad, bn_pad], 1))
                new_xs.append(z[:, :n])
                updates.append(z[:, n:])
            xs = new_xs
            bottleneck = torch.stack(updates).mean(0)
        audio_out = self.audio_out_norm(xs[0])
        visual_out = self.visual_out_norm(xs[1]) if len(xs) > 1 else None
        if bottleneck is not None:
            bottleneck = self.bottleneck_out_norm(bottleneck)
        return EncoderOutput(audio_out, visual_out, bottleneck, audio_padding)

    def encode_unimodal(self, tokens, modality: str, padding=None) -> torch.Tensor:
        """One modality stack on its own, with no bottleneck exchange."""
        blocks = self.audio_layers if modality == "audio" else self.visual_layers
        norm = self.audio_out_norm if modality == "audio" else self.visual_out_norm
        x = tokens
        for block in blocks:
            x = block(x, padding)
        return norm(x)

    # -- decoder ------------------------------------------------------------

    def decoder_logits(self, enc: EncoderOutput, input_ids: torch.Tensor) -> torch.Tensor:
        length = input_ids.shape[1]
        if length > self.cfg.max_text_len:
            raise ValueError(f"text length {length} exceeds max_text_len={self.cfg.max_text_len}")
        memory, memory_padding = enc.memory()
        y = self.token_embed[input_ids] + self.text_pos[:length]
        for block in self.decoder_layers:
            y = block(y, memory, memory_padding)
        return self.lm_head(self.decoder_out_norm(y))

    def alignment_logprobs(self, enc: EncoderOutput) -> torch.Tensor:
        """Per audio token log-distribution over the vocabulary; PAD stands for silence."""
        return tc.log_softmax(self.align_head(enc.audio), dim=-1)

    @torch.no_grad()
    def decode_greedy(self, enc: EncoderOutput, max_len: int) -> list[list[int]]:
        """Greedy autoregressive decoding for every item of the batch.

        Each returned list holds the generated ids after BOS, ending with EOS
        when the model emitted it within ``max_len`` steps.
        """
        if max_len <= 0:
            raise ValueError("max_len must be positive")
        max_len = min(max_len, self.cfg.max_text_len)
        batch = enc.audio.shape[0]
        ids = torch.full((batch, 1), BOS, dtype=torch.long)
        done = torch.zeros(batch, dtype=torch.bool)
        out: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            logits = self.decoder_logits(enc, ids)[:, -1]
            nxt = logits.argmax(dim=-1)
            for b in range(batch):
                if not done[b]:
                    out[b].append(int(nxt[b]))
            done |= nxt == EOS
            if bool(done.all()) or ids.shape[1] >= self.cfg.max_text_len:
                break
            ids = torch.cat([ids, nxt[:, None]], dim=1)
        return out


# -- batching and training ------------------------------------------------------


@dataclass
class FramePool:
    """All 1-fps frames of one recording, kept as uint8 to bound memory."""

    times: np.ndarray
    pixels: np.ndarray  # [n, 224, 224, 3] uint8

    def tubelets(self, start_s: float, end_s: float, rng_seed: Optional[int]) -> np.ndarray:
        idx = sample_frames(self.times, start_s, end_s, 2, rng_seed)
        stack = FrameStack(self.pixels[idx].astype(np.float32) / 255.0, tuple(self.times[idx]))
        return tubelet_tokenize(stack).tokens


@dataclass
class ClipExample:
    """One training or evaluation clip: features plus its reference words."""

    spectrogram: Spectrogram
    words: tuple = ()  # TimedWord, absolute recording time
    frames: Optional[FramePool] = None
    clip_start_s: float = 0.0
    clip_end_s: float = 0.0
    utterance_id: str = ""

    @property
    def transcript(self) -> list[str]:
        return [w.word for w in self.words]


def alignment_labels(spec: Spectrogram, words: Sequence[TimedWord], vocab: Vocabulary, frames_per_token: int) -> np.ndarray:
    """Word id under the center of every audio token, PAD where nobody speaks."""
    n_tok = -(-spec.n_frames // frames_per_token)
    centers = spec.frame_centers()
    labels = np.full(n_tok, PAD, dtype=np.int64)
    for t in range(n_tok):
        group = centers[t * frames_per_token : (t + 1) * frames_per_token]
        c = float(group.mean())
        for w in words:
            if w.start_s <= c < w.end_s:
                labels[t] = vocab.stoi.get(w.word, UNK)
                break
    return labels


class Batch(NamedTuple):
    audio: torch.Tensor
    audio_padding: torch.Tensor
    visual: Optional[torch.Tensor]
    input_ids: torch.Tensor
    target_ids: torch.Tensor
    align_labels: torch.Tensor


def collate(
    model: AVTranscriber,
    examples: Sequence[ClipExample],
    vocab: Vocabulary,
    masking: Optional[MaskingConfig] = None,
    rng: Optional[np.random.Generator] = None,
    train: bool = True,
) -> Batch:
    """Pad a list of clips into tensors; masking and random frames only when ``train``."""
    if not examples:
        raise ValueError("empty batch")
    cfg = model.cfg
    grouped, labels, texts, visuals = [], [], [], []
    for ex in examples:
        spec = ex.spectrogram
        if train and masking is not None and masking.strategy != "none":
            spec = mask_spans(spec, select_mask_words(ex.words, masking, rng))
        grouped.append(model.group_frames(spec.values))
        labels.append(alignment_labels(ex.spectrogram, ex.words, vocab, cfg.frames_per_token))
        ids = vocab.encode(ex.transcript)
        if len(ids) + 1 > cfg.max_text_len:
            raise ValueError(f"transcript of {len(ids)} words exceeds max_text_len={cfg.max_text_len}")
        texts.append(ids)
        if cfg.modality == "audio_visual":
            if ex.frames is None:
                raise ValueError(f"clip {ex.utterance_id!r} has no frames for an audio_visual model")
            seed = int(rng.integers(2**31)) if (train and rng is not None) else None
            visuals.append(ex.frames.tubelets(ex.clip_start_s, ex.clip_end_s, seed))
    batch = len(examples)
    t_max = max(g.shape[0] for g in grouped)
    audio = np.zeros((batch, t_max, grouped[0].shape[1]))
    padding = np.ones((batch, t_max), dtype=bool)
    align = np.full((batch, t_max), -1, dtype=np.int64)
    for b, (g, lab) in enumerate(zip(grouped, labels)):
        audio[b, : len(g)] = g
        padding[b, : len(g)] = False
        align[b, : len(lab)] = lab
    l_max = max(len(t) for t in texts) + 1
    inp = np.full((batch, l_max), PAD, dtype=np.int64)
    tgt = np.full((batch, l_max), PAD, dtype=np.int64)
    for b, ids in enumerate(texts):
        inp[b, : len(ids) + 1] = [BOS] + ids
        tgt[b, : len(ids) + 1] = ids + [EOS]
    dtype = model.dtype
    return Batch(
        torch.as_tensor(audio, dtype=dtype),
        torch.as_tensor(padding),
        torch.as_tensor(np.stack(visuals), dtype=dtype) if visuals else None,
        torch.as_tensor(inp),
        torch.as_tensor(tgt),
        torch.as_tensor(align),
    )


def forward_encoder(model: AVTranscriber, batch: Batch) -> EncoderOutput:
    audio = model.embed_audio(batch.audio)
    visual = model.embed_visual(batch.visual) if batch.visual is not None else None
    return model.encode(audio, visual, batch.audio_padding)


def batch_loss(model: AVTranscriber, batch: Batch) -> torch.Tensor:
    """Teacher-forced decoder cross-entropy plus the weighted alignment-head loss."""
    enc = forward_encoder(model, batch)
    logits = model.decoder_logits(enc, batch.input_ids)
    loss = tc.cross_entropy(logits, batch.target_ids, PAD)
    w = model.cfg.align_loss_weight
    if w > 0:
        align_logits = model.align_head(enc.audio)
        loss = loss + w * tc.cross_entropy(align_logits, batch.align_labels, -1)
    return loss


class Trainer:
    """Owns the mutable parameters and optimizer state of one training run."""

    def __init__(self, model: AVTranscriber, vocab: Vocabulary, optim: tc.OptimConfig = tc.OptimConfig()):
        self.model = model
        self.vocab = vocab
        self.optim_cfg = optim
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer, self.scheduler = tc.make_optimizer(self.params, optim)
        self.steps = 0

    def train_step(self, examples: Sequence[ClipExample], masking: Optional[MaskingConfig] = None, rng_seed: int = 0) -> float:
        if not examples:
            raise ValueError("empty batch")
        self.model.train()
        rng = np.random.default_rng(rng_seed)
        batch = collate(self.model, examples, self.vocab, masking, rng, train=True)
        self.optimizer.zero_grad(set_to_none=True)
        loss = batch_loss(self.model, batch)
        loss.backward()
        tc.clip_grad_norm(self.params, self.optim_cfg.clip_norm)
        self.optimizer.step()
        self.scheduler.step()
        self.steps += 1
        return float(loss.detach())


@torch.no_grad()
def transcribe_clips(model: AVTranscriber, vocab: Vocabulary, examples: Sequence[ClipExample], max_len: Optional[int] = None):
    """Greedy transcripts (word lists), one clip at a time for batch-independent results."""
    model.eval()
    out = []
    for ex in examples:
        batch = collate(model, [ex], vocab, train=False)
        enc = forward_encoder(model, batch)
        ids = model.decode_greedy(enc, max_len or model.cfg.max_text_len)[0]
        out.append(vocab.decode(ids))
    return out


# -- checkpoints ------------------------------------------------------------------


def save_model(path, model: AVTranscriber, vocab: Vocabulary, extra: Optional[dict] = None) -> None:
    meta = {"model_config": model.cfg.to_json(), "vocab": vocab.words()}
    if extra:
        meta.update(extra)
    tc.save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple[AVTranscriber, Vocabulary, dict]:
    tensors, meta = tc.load_checkpoint(path)
    cfg = ModelConfig.from_json(meta["model_config"])
    model = AVTranscriber(cfg)
    missing = set(model.state_dict()) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    model.load_state_dict(tensors)
    model.eval()
    return model, Vocabulary(meta["vocab"]), meta
