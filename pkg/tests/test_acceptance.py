"""End-to-end acceptance checks, one test per criterion.

Each test records a short detail string; ``conftest.py`` prints a PASS/FAIL
line per criterion at the end of the session.
"""

import itertools
import json
import shutil
import time

import numpy as np
import pytest
import torch

from avtranscribe import tensor_core as tc
from avtranscribe.aligner import AlignedRun, EmissionMatrix, alignment_score, viterbi_align
from avtranscribe.audio_features import Waveform, log_mel_spectrogram
from avtranscribe.cli import main as cli_main
from avtranscribe.evaluation import wer
from avtranscribe.masking import MaskingConfig, select_mask_words
from avtranscribe.pipeline import PipelineConfig, build_training_set, fixed_chunk_wer, load_manifest, train_model
from avtranscribe.segmentation import TimedWord, assign_words, fixed_segments
from avtranscribe.synth import SynthSpec, make_synthetic_corpus
from avtranscribe.transcriber import AVTranscriber, Trainer, batch_loss, collate, ModelConfig
from avtranscribe.vocab import Vocabulary

from oracles import brute_force_edit_distance, enumerate_alignments, naive_log_mel

SEEDS = (0, 1, 2)


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


# -- 1 --------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_c1_dsp_matches_naive_dft(request):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 16001))
        x = rng.normal(0, rng.uniform(0.01, 1.0), n)
        fast = log_mel_spectrogram(Waveform(x)).values
        slow = naive_log_mel(x)
        assert fast.shape == slow.shape
        worst = max(worst, float(np.max(np.abs(fast - slow) / np.abs(slow))))
    elapsed = time.perf_counter() - t0
    _detail(request, f"max rel err {worst:.2e} over 100 waveforms in {elapsed:.1f} s")
    assert worst < 1e-6
    assert elapsed < 30


# -- 2 --------------------------------------------------------------------------


def _primitive_checks(rng):
    def t(*shape):
        return torch.tensor(rng.normal(size=shape), dtype=torch.float64, requires_grad=True)

    x, w, b = t(3, 5), t(4, 5), t(4)
    g, beta = t(5), t(5)
    q, k, v = t(2, 3, 8), t(2, 4, 8), t(2, 4, 8)
    ow, ob = t(8, 8), t(8)
    r = torch.tensor(rng.normal(size=(3, 5)))
    pad = torch.tensor([[False, False, True, False], [False, True, False, False]])
    logits = t(6, 7)
    targets = torch.tensor([1, 0, 3, 6, 0, 2])
    return {
        "gelu": (lambda: (tc.gelu(x) * r).sum(), {"x": x}),
        "relu": (lambda: (tc.relu(x) * r).sum(), {"x": x}),
        "softmax": (lambda: (tc.softmax(x) * r).sum(), {"x": x}),
        "log_softmax": (lambda: (tc.log_softmax(x) * r).sum(), {"x": x}),
        "linear": (lambda: tc.linear(x, w, b).pow(2).sum(), {"x": x, "w": w, "b": b}),
        "layer_norm": (lambda: (tc.layer_norm(x, g, beta) * r).sum(), {"x": x, "g": g, "b": beta}),
        "attend": (lambda: tc.attend(q, k, v, 2, key_padding_mask=pad).pow(2).sum(), {"q": q, "k": k, "v": v}),
        "attend_causal": (lambda: tc.attend(q, q, q, 4, causal=True).pow(2).sum(), {"q": q}),
        "multi_head_attention": (
            lambda: tc.multi_head_attention(q, k, v, 2, ow, ob).pow(2).sum(),
            {"q": q, "k": k, "v": v, "ow": ow, "ob": ob},
        ),
        "cross_entropy": (lambda: tc.cross_entropy(logits, targets, 0), {"logits": logits}),
    }


@pytest.mark.criterion(2)
def test_c2_gradient_checks(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []
    n_checked = 0
    for name, (f, params) in _primitive_checks(rng).items():
        for rep in tc.finite_diff_check(f, params, tol=1e-4):
            n_checked += rep.n_checked
            if not rep.passed or rep.n_checked == 0:
                failures.append(f"{name}.{rep.name}")

    words = ["knife", "bowl", "cut"]
    vocab = Vocabulary(words)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, encoder_layers=1, fusion_start_layer=1, n_bottleneck_tokens=2,
                      encoder_heads=2, decoder_layers=1, decoder_heads=2, max_audio_tokens=16)
    model = AVTranscriber(cfg, seed=0).double()
    from avtranscribe.transcriber import ClipExample, FramePool
    from avtranscribe.audio_features import Spectrogram

    spec = Spectrogram(rng.normal(size=(24, 80)), 0.01)
    pool = FramePool(np.array([0.0]), rng.integers(0, 255, (1, 224, 224, 3), dtype=np.uint8))
    ex = ClipExample(spec, (TimedWord("knife", 0.0, 0.1), TimedWord("cut", 0.12, 0.24)), pool, 0.0, 0.24)
    batch = collate(model, [ex], vocab, train=False)
    for rep in tc.finite_diff_check(lambda: batch_loss(model, batch), dict(model.named_parameters()), tol=1e-4, max_coords=8):
        n_checked += rep.n_checked
        if not rep.passed:
            failures.append(f"model.{rep.name} ({rep.max_rel_error:.1e})")
    elapsed = time.perf_counter() - t0
    _detail(request, f"{n_checked} coordinates, {len(failures)} failures, {elapsed:.1f} s")
    assert not failures, failures
    assert elapsed < 120


# -- 3 --------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_c3_wer_bruteforce(request):
    t0 = time.perf_counter()
    seqs = [list(p) for n in range(5) for p in itertools.product("abc", repeat=n)]
    pairs = 0
    for ref in seqs[1:]:
        for hyp in seqs:
            assert wer(ref, hyp).errors == brute_force_edit_distance(ref, hyp), (ref, hyp)
            pairs += 1
    special = wer(["a"], ["b", "c", "d"]).wer_percent
    elapsed = time.perf_counter() - t0
    _detail(request, f"{pairs} pairs, special case {special}, {elapsed:.1f} s")
    assert special == 300.0
    assert elapsed < 10


# -- 4 --------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_c4_segmentation_partition(request):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 40))
        edges = np.sort(rng.uniform(0, 120, 2 * n))
        words = [TimedWord(f"w{i}", float(edges[2 * i]), float(edges[2 * i + 1])) for i in range(n)]
        duration = float(max(edges[-1] if n else 0.0, rng.uniform(0.1, 120)))
        segs = assign_words(words, fixed_segments(duration, float(rng.choice([1.0, 5.0, 20.0, 33.3]))))
        assert [w for s in segs for w in s.words] == words
    _detail(request, "1000 utterances, every word kept once and in order")


# -- 5 --------------------------------------------------------------------------


def _log_rows(x):
    m = x.max(1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(1, keepdims=True))


@pytest.mark.criterion(5)
def test_c5_viterbi_recovery(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(1, 8))
        syms = [int(rng.integers(0, 10))]
        while len(syms) < k:
            s = int(rng.integers(0, 10))
            if s != syms[-1]:
                syms.append(s)
        bounds = np.concatenate([[0], np.cumsum(rng.integers(1, 10, k))])
        logits = rng.uniform(0, 1, (bounds[-1], 10))
        for i, s in enumerate(syms):
            logits[bounds[i] : bounds[i + 1], s] = 3.0 + rng.uniform(0, 1)  # >= 2 nats above every rival
        runs = viterbi_align(EmissionMatrix(_log_rows(logits), 0.01), syms, allow_blank=False)
        assert [(r.start_frame, r.end_frame + 1) for r in runs] == list(zip(bounds[:-1], bounds[1:]))
    n_enum = 0
    for n_frames in range(1, 9):
        for k in range(1, min(n_frames, 3) + 1):
            for allow_blank in (False, True):
                syms = list(rng.integers(0, 4, k))
                em = EmissionMatrix(_log_rows(rng.normal(0, 2, (n_frames, 4))), 0.01)
                best = max(
                    sum(-5.0 if lab < 0 else em.scores[t, syms[lab]] for t, lab in enumerate(p))
                    for p in enumerate_alignments(n_frames, k, allow_blank)
                )
                got = alignment_score(em, viterbi_align(em, syms, allow_blank=allow_blank))
                assert got == pytest.approx(best, abs=1e-9)
                n_enum += 1
    elapsed = time.perf_counter() - t0
    _detail(request, f"100 planted instances, {n_enum} exhaustive comparisons, {elapsed:.1f} s")
    assert elapsed < 30


# -- 6 --------------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_c6_overfit(request, tmp_path):
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    man = make_synthetic_corpus(SynthSpec(n_utterances=16, vocab_size=20, frames=False), tmp_path, seed=0)
    vocab = Vocabulary(man["vocabulary"])
    cfg = PipelineConfig(model=dict(d_model=32, encoder_layers=2, fusion_start_layer=2, decoder_layers=2, modality="audio"),
                         batch_size=16, seed=0)
    examples = build_training_set(load_manifest(tmp_path / "manifest.json"), cfg, "gt", with_frames=False)
    assert len(examples) == 16
    model = AVTranscriber(cfg.model_config(len(vocab)), seed=0)
    trainer = Trainer(model, vocab, cfg.optim)
    step, br = 0, None
    while step < 2000:
        for _ in range(100):
            trainer.train_step(examples, rng_seed=step)
            step += 1
        br = fixed_chunk_wer(model, vocab, examples)
        if br.errors == 0:
            break
    elapsed = time.perf_counter() - t0
    _detail(request, f"train WER {br.wer_percent} on {br.n_reference_words} words after {step} steps, {elapsed:.0f} s")
    assert br.n_reference_words > 16
    assert br.wer_percent == 0.0
    assert elapsed < 600


# -- 7 --------------------------------------------------------------------------


@pytest.mark.criterion(7)
def test_c7_masking_contracts(request, tmp_path):
    rng = np.random.default_rng(0)
    content = MaskingConfig("content_word", 0.5)
    pool = sorted(content.stopword_list)[:30] + ["knife", "bowl", "onion", "carrot", "pan", "spoon"]
    for i in range(10_000):
        words = [TimedWord(pool[j], 0.3 * k, 0.3 * k + 0.25) for k, j in enumerate(rng.integers(0, len(pool), 8))]
        picked = set(select_mask_words(words, content, i))
        assert not any((w.start_s, w.end_s) in picked for w in words if w.word in content.stopword_list)

    man = make_synthetic_corpus(SynthSpec(n_utterances=4, frames=False), tmp_path, seed=0)
    cfg = PipelineConfig(model=dict(d_model=16, encoder_layers=1, fusion_start_layer=1, decoder_layers=1, modality="audio"))
    examples = build_training_set(load_manifest(tmp_path / "manifest.json"), cfg, "gt", with_frames=False)
    vocab = Vocabulary(man["vocabulary"])
    model = AVTranscriber(cfg.model_config(len(vocab)))
    floor = examples[0].spectrogram.floor_value
    full = collate(model, examples, vocab, MaskingConfig("random_word", 1.0), np.random.default_rng(0))
    plain = collate(model, examples, vocab, None, np.random.default_rng(0))
    changed = (full.audio != plain.audio) & ~full.audio_padding[..., None]
    assert changed.any() and torch.all(full.audio[changed] == floor)
    zero = collate(model, examples, vocab, MaskingConfig("random_word", 0.0), np.random.default_rng(0))
    assert zero.audio.numpy().tobytes() == plain.audio.numpy().tobytes()
    _detail(request, "10000 transcripts without a masked stopword; floor exact; rate 0 byte-identical")


# -- 8 --------------------------------------------------------------------------


def _vision_run(seed, root):
    spec = SynthSpec(n_utterances=400, vocab_size=6, n_stopwords=0, n_ambiguous_pairs=3, words_per_sentence=(2, 3),
                     visual_cue=True, val_fraction=0.2)
    man = make_synthetic_corpus(spec, root, seed=seed)
    m = load_manifest(root / "manifest.json")
    vocab = Vocabulary(man["vocabulary"])
    scores = {}
    for modality in ("audio_only", "audio_visual"):
        cfg = PipelineConfig(
            model=dict(d_model=32, encoder_layers=1, fusion_start_layer=1, decoder_layers=1, modality=modality),
            optim=tc.OptimConfig(lr=3e-3), batch_size=16, steps=1500, seed=seed)
        av = modality == "audio_visual"
        train = build_training_set(m, cfg, "gt", "train", with_frames=av)
        val = build_training_set(m, cfg, "gt", "val", with_frames=av)
        model, _ = train_model(train, vocab, cfg)
        scores[modality] = fixed_chunk_wer(model, vocab, val).wer_percent
    return scores


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_c8_vision_helps(request, tmp_path):
    torch.set_num_threads(1)
    results = []
    for seed in SEEDS:
        root = tmp_path / f"seed{seed}"
        results.append(_vision_run(seed, root))
        shutil.rmtree(root)  # frames take ~150 MB per corpus
    wins = sum(r["audio_visual"] < r["audio_only"] for r in results)
    _detail(request, f"A+V beats A on {wins}/3 seeds; " + ", ".join(
        f"A {r['audio_only']:.1f} vs A+V {r['audio_visual']:.1f}" for r in results))
    assert wins >= 2


# -- 9 --------------------------------------------------------------------------


def _segmentation_run(seed, root):
    spec = SynthSpec(n_utterances=200, vocab_size=10, n_stopwords=2, sentences_per_utterance=(2, 4),
                     silence_ratio=0.5, frames=False, val_fraction=0.2)
    man = make_synthetic_corpus(spec, root, seed=seed)
    m = load_manifest(root / "manifest.json")
    vocab = Vocabulary(man["vocabulary"])
    cfg = PipelineConfig(model=dict(d_model=32, encoder_layers=1, fusion_start_layer=1, decoder_layers=1, modality="audio"),
                         optim=tc.OptimConfig(lr=3e-3), batch_size=16, steps=1000, seed=seed, chunk_s=3.0)
    val = build_training_set(m, cfg, "fixed", "val", with_frames=False)
    scores = {}
    for scheme in ("gt", "fixed"):
        model, _ = train_model(build_training_set(m, cfg, scheme, "train", with_frames=False), vocab, cfg)
        scores[scheme] = fixed_chunk_wer(model, vocab, val).wer_percent
    return scores


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_c9_fixed_segment_training_helps(request, tmp_path):
    torch.set_num_threads(1)
    results = [_segmentation_run(seed, tmp_path / f"seed{seed}") for seed in SEEDS]
    wins = sum(r["fixed"] < r["gt"] for r in results)
    _detail(request, f"fixed beats gt on {wins}/3 seeds; " + ", ".join(
        f"gt {r['gt']:.1f} vs fixed {r['fixed']:.1f}" for r in results))
    assert wins >= 2


# -- 10 -------------------------------------------------------------------------


def _full_run(root):
    root.mkdir()
    (root / "synth.json").write_text(json.dumps({"n_utterances": 8, "vocab_size": 8, "n_stopwords": 2,
                                                  "visual_cue": True, "n_ambiguous_pairs": 1, "val_fraction": 0.25}))
    (root / "cfg.json").write_text(json.dumps({
        "model": {"d_model": 16, "encoder_layers": 1, "fusion_start_layer": 1, "decoder_layers": 1,
                  "encoder_heads": 2, "decoder_heads": 2},
        "steps": 200, "batch_size": 4}))
    man = root / "corpus" / "manifest.json"
    steps = [
        ["synth", "--config", root / "synth.json", "--seed", 5, "--out", root / "corpus"],
        ["train", "--config", root / "cfg.json", "--manifest", man, "--modality", "audio_visual", "--segmentation", "fixed",
         "--masking", "content", "--seed", 5, "--out", root / "model.ckpt"],
        ["transcribe", "--checkpoint", root / "model.ckpt", "--manifest", man, "--out", root / "pred.jsonl"],
        ["evaluate", "--manifest", man, "--predictions", root / "pred.jsonl", "--out", root / "report.json"],
    ]
    for argv in steps:
        assert cli_main([str(a) for a in argv]) == 0, argv
    return (root / "pred.jsonl").read_bytes(), (root / "report.json").read_bytes()


@pytest.mark.criterion(10)
def test_c10_end_to_end_determinism(request, tmp_path):
    a = _full_run(tmp_path / "run1")
    b = _full_run(tmp_path / "run2")
    _detail(request, f"predictions {len(a[0])} bytes, report {len(a[1])} bytes, identical={a == b}")
    assert a[0] == b[0]
    assert a[1] == b[1]
