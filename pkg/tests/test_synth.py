import hashlib
import json

import numpy as np
import pytest

from avtranscribe.audio_features import read_wav
from avtranscribe.synth import SynthSpec, build_layout, make_synthetic_corpus, make_utterance, silent_fraction, visible_words
from avtranscribe.segmentation import Segment
from avtranscribe.visual_features import read_ppm


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_regeneration_is_byte_identical(tmp_path):
    spec = SynthSpec(n_utterances=4, visual_cue=True, val_fraction=0.25)
    make_synthetic_corpus(spec, tmp_path / "a", seed=3)
    make_synthetic_corpus(spec, tmp_path / "b", seed=3)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    make_synthetic_corpus(spec, tmp_path / "c", seed=4)
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_manifest_contents(tmp_path):
    spec = SynthSpec(n_utterances=5, val_fraction=0.2, test_fraction=0.2, frames=False)
    man = make_synthetic_corpus(spec, tmp_path, seed=0)
    assert json.loads((tmp_path / "manifest.json").read_text()) == json.loads(json.dumps(man))
    assert [u["split"] for u in man["utterances"]] == ["train"] * 3 + ["val", "test"]
    for u in man["utterances"]:
        assert read_wav(tmp_path / u["wav_path"]).sample_rate_hz == 16000
        words = [w["word"] for w in u["word_timings"]]
        assert " ".join(words) == u["transcript"]
        assert all(w in man["vocabulary"] for w in words)
        assert "frames" not in u


@pytest.mark.parametrize("ratio", [0.0, 0.4, 0.6])
def test_silence_ratio_is_honoured(ratio):
    spec = SynthSpec(silence_ratio=ratio, sentences_per_utterance=(2, 3), noise_std=0.003)
    layout = build_layout(spec, 0)
    rng = np.random.default_rng(0)
    fracs = [silent_fraction(make_utterance(layout, spec, rng)[0]) for _ in range(20)]
    if ratio == 0.0:
        assert np.mean(fracs) < 0.3  # only inter-word gaps and edge padding
    else:
        assert abs(np.mean(fracs) - ratio) < 0.05


def test_segments_partition_sentences_and_respect_order():
    spec = SynthSpec(sentences_per_utterance=(3, 3), silence_ratio=0.5)
    layout = build_layout(spec, 1)
    wav, timings, segments = make_utterance(layout, spec, np.random.default_rng(1))
    assert len(segments) == 3
    assert [w for s in segments for w in s.words] == timings
    for a, b in zip(segments, segments[1:]):
        assert a.end_s <= b.start_s
    assert 0 <= segments[0].start_s and segments[-1].end_s <= wav.duration_seconds


def test_ambiguous_pairs_share_waveform_but_not_glyph():
    spec = SynthSpec(vocab_size=10, n_stopwords=2, n_ambiguous_pairs=2)
    layout = build_layout(spec, 0)
    assert len(layout.ambiguous_pairs) == 2
    for a, b in layout.ambiguous_pairs:
        assert layout.signature_of[a] == layout.signature_of[b]
        assert layout.cell_of[a] != layout.cell_of[b]
        assert not np.array_equal(layout.glyphs[a], layout.glyphs[b])
    sigs = {layout.signature_of[w] for w in layout.words}
    assert len(sigs) == len(layout.words) - 2


def test_visual_cue_draws_visible_words(tmp_path):
    spec = SynthSpec(n_utterances=1, vocab_size=6, n_stopwords=0, visual_cue=True)
    man = make_synthetic_corpus(spec, tmp_path, seed=0)
    layout = build_layout(spec, 0)
    u = man["utterances"][0]
    img = read_ppm(tmp_path / u["frames"][0]["path"])
    shown = set(u["transcript"].split())
    for w in layout.words:
        r, c = divmod(layout.cell_of[w], 14)
        patch = img[r * 16 : (r + 1) * 16, c * 16 : (c + 1) * 16]
        assert (patch.std() > 50) == (w in shown)


def test_visible_words_picks_nearest_segment():
    from avtranscribe.segmentation import TimedWord

    segs = [Segment(0.0, 1.0, (TimedWord("a", 0.2, 0.5),)), Segment(3.0, 4.0, (TimedWord("b", 3.2, 3.5),))]
    assert visible_words(segs, 0.5) == ["a"]
    assert visible_words(segs, 1.9) == ["a"]
    assert visible_words(segs, 2.1) == ["b"]


def test_invalid_specs():
    with pytest.raises(ValueError):
        SynthSpec(vocab_size=100).validate()
    with pytest.raises(ValueError):
        SynthSpec(vocab_size=6, n_stopwords=2, n_ambiguous_pairs=3).validate()
    with pytest.raises(ValueError):
        SynthSpec(silence_ratio=1.0).validate()
