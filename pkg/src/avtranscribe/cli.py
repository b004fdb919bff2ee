"""Command-line entry point.

Every subcommand exits 0 on success. On failure a single JSON line
``{"error": <kind>, "message": <text>}`` goes to stderr and the exit code is 1
(2 for argument errors, as argparse does).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .aligner import AlignmentError, EmissionMatrix, uniform_align, viterbi_align, word_timestamps
from .audio_features import read_wav, save_spectrogram, log_mel_spectrogram
from .masking import MaskingConfig
from .pipeline import (
    ManifestError,
    PipelineConfig,
    build_training_set,
    clip_example,
    evaluate_predictions,
    load_frame_pool,
    load_manifest,
    read_predictions,
    train_model,
    transcribe_untrimmed,
    write_predictions,
)
from .segmentation import assign_words, fixed_segments
from .synth import SynthSpec, make_synthetic_corpus
from .transcriber import collate, forward_encoder, load_model, save_model
from .vocab import PAD, Vocabulary

log = logging.getLogger("avtranscribe")

MASKING = {"none": "none", "random": "random_word", "content": "content_word"}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise CliError("usage", f"--{name.replace('_', '-')} is required for {args.command}")


def _json_dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def pipeline_config(args) -> PipelineConfig:
    """Config file first, then any explicit flags on top."""
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    model = dict(cfg.model)
    if args.modality is not None:
        model["modality"] = args.modality
    updates = {"model": model}
    if args.masking is not None:
        updates["masking"] = MaskingConfig(MASKING[args.masking], cfg.masking.mask_rate, cfg.masking.stopword_list)
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.chunk_seconds is not None:
        if args.chunk_seconds <= 0:
            raise CliError("usage", "--chunk-seconds must be positive")
        updates["chunk_s"] = args.chunk_seconds
    return dataclasses.replace(cfg, **updates)


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> dict:
    _require(args, "out")
    spec = SynthSpec()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        raw = raw.get("synth", raw)
        known = {f.name for f in dataclasses.fields(SynthSpec)}
        unknown = set(raw) - known
        if unknown:
            raise CliError("config", f"unknown synth fields: {sorted(unknown)}")
        spec = SynthSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    man = make_synthetic_corpus(spec, args.out, seed=args.seed or 0)
    return {"manifest": str(Path(args.out) / "manifest.json"), "n_utterances": len(man["utterances"])}


def cmd_featurize(args) -> dict:
    _require(args, "manifest", "out")
    cfg = pipeline_config(args)
    man = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for utt in man.utterances:
        save_spectrogram(out / f"{utt.id}.avsp", log_mel_spectrogram(read_wav(utt.wav_path), cfg.features))
    return {"n_files": len(man.utterances), "out": str(out)}


def cmd_segment(args) -> dict:
    _require(args, "manifest", "out")
    cfg = pipeline_config(args)
    man = load_manifest(args.manifest)
    result = {}
    for utt in man.utterances:
        if args.segmentation == "gt":
            if not utt.segments:
                raise ManifestError(f"{utt.id}: gt segmentation requires per-utterance segments")
            segs = utt.segments
        else:
            segs = fixed_segments(read_wav(utt.wav_path).duration_seconds, cfg.chunk_s)
            if utt.word_timings is not None:
                segs = assign_words(utt.word_timings, segs)
        result[utt.id] = [s.to_json() for s in segs]
    _json_dump(args.out, result)
    return {"n_utterances": len(result), "out": args.out}


def cmd_train(args) -> dict:
    _require(args, "manifest", "out")
    cfg = pipeline_config(args)
    man = load_manifest(args.manifest)
    words = man.extra.get("vocabulary")
    if words is None:
        words = sorted({w for u in man.utterances for w in (u.transcript or [])})
    vocab = Vocabulary(words)
    av = cfg.model_config(len(vocab)).modality == "audio_visual"
    examples = build_training_set(man, cfg, args.segmentation, "train", with_frames=av)
    torch.set_num_threads(1)
    model, losses = train_model(examples, vocab, cfg, log_every=100)
    save_model(args.out, model, vocab, {"pipeline_config": cfg.to_json()})
    return {"checkpoint": args.out, "steps": len(losses), "final_loss": losses[-1] if losses else None}


def _load_for_inference(args):
    _require(args, "checkpoint", "manifest", "out")
    model, vocab, meta = load_model(args.checkpoint)
    cfg = PipelineConfig.from_json(meta.get("pipeline_config", {}))
    if args.chunk_seconds is not None:
        cfg = dataclasses.replace(cfg, chunk_s=args.chunk_seconds)
    return model, vocab, cfg, load_manifest(args.manifest)


def cmd_transcribe(args) -> dict:
    model, vocab, cfg, man = _load_for_inference(args)
    torch.set_num_threads(1)
    av = model.cfg.modality == "audio_visual"
    predictions = {}
    for utt in man.split(args.split):
        frames = load_frame_pool(utt) if av else None
        predictions[utt.id] = transcribe_untrimmed(read_wav(utt.wav_path), frames, model, vocab, cfg, utt.id)
    write_predictions(args.out, predictions)
    return {"n_utterances": len(predictions), "out": args.out}


@torch.no_grad()
def cmd_align(args) -> dict:
    """Force-align each utterance's reference transcript with the alignment head."""
    model, vocab, cfg, man = _load_for_inference(args)
    av = model.cfg.modality == "audio_visual"
    predictions = {}
    for utt in man.split(args.split):
        if utt.transcript is None:
            raise ManifestError(f"{utt.id}: align needs a transcript")
        wav = read_wav(utt.wav_path)
        frames = load_frame_pool(utt) if av else None
        ex = clip_example(wav, 0.0, wav.duration_seconds, (), cfg.features, frames, utt.id)
        words = list(utt.transcript)
        if not words:
            predictions[utt.id] = []
            continue
        batch = collate(model, [ex], vocab, train=False)
        enc = forward_encoder(model, batch)
        hop = ex.spectrogram.hop_seconds * model.cfg.frames_per_token
        em = EmissionMatrix(model.alignment_logprobs(enc)[0].double().numpy(), hop, 0.0)
        try:
            runs = viterbi_align(em, vocab.encode(words), allow_blank=True, blank_id=PAD)
            timed = word_timestamps(runs, hop, 0.0, words=words)
        except AlignmentError:
            timed = uniform_align(words, 0.0, wav.duration_seconds)
        predictions[utt.id] = timed
    write_predictions(args.out, predictions)
    return {"n_utterances": len(predictions), "out": args.out}


def cmd_evaluate(args) -> dict:
    _require(args, "manifest", "predictions", "out")
    man = load_manifest(args.manifest)
    preds = read_predictions(args.predictions)
    unknown = set(preds) - {u.id for u in man.utterances}
    if unknown:
        raise ManifestError(f"predictions for unknown utterances: {sorted(unknown)[:5]}")
    report = evaluate_predictions(preds, man, args.split).to_json()
    _json_dump(args.out, report)
    return {"wer_percent": report["wer_percent"], "out": args.out}


COMMANDS = {
    "featurize": cmd_featurize,
    "segment": cmd_segment,
    "train": cmd_train,
    "transcribe": cmd_transcribe,
    "align": cmd_align,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avtranscribe", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config")
    parser.add_argument("--manifest")
    parser.add_argument("--checkpoint")
    parser.add_argument("--predictions", help="prediction JSONL (evaluate)")
    parser.add_argument("--split", choices=["train", "val", "test"], help="restrict to one manifest split")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--modality", choices=["audio", "audio_visual"])
    parser.add_argument("--segmentation", choices=["gt", "fixed"], default="fixed")
    parser.add_argument("--masking", choices=sorted(MASKING))
    parser.add_argument("--chunk-seconds", type=float, default=None, help="chunk length in seconds (default 20)")
    parser.add_argument("--out")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _emit_error(kind: str, message: str) -> None:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except CliError as exc:
        _emit_error(exc.kind, str(exc))
        return 1
    except ManifestError as exc:
        _emit_error("manifest", str(exc))
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        _emit_error("io", str(exc))
        return 1
    except (ValueError, KeyError, TypeError) as exc:
        _emit_error("invalid_input", str(exc))
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
