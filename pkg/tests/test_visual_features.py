import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avtranscribe.visual_features import (
    FrameStack,
    N_TOKENS,
    TOKEN_DIM,
    TubeletTokens,
    detokenize,
    frame_filename,
    list_frames,
    load_frame_stack,
    read_ppm,
    sample_frames,
    tubelet_tokenize,
    write_ppm,
)


def _frames(rng=None, fill=None):
    if fill is not None:
        return FrameStack(np.full((2, 224, 224, 3), fill, dtype=np.float32))
    return FrameStack(rng.random((2, 224, 224, 3)).astype(np.float32))


def test_token_geometry():
    tt = tubelet_tokenize(_frames(np.random.default_rng(0)))
    assert tt.tokens.shape == (196, 1536) == (N_TOKENS, TOKEN_DIM)
    assert tt.grid == (14, 14)


def test_constant_frames_give_identical_tokens():
    tt = tubelet_tokenize(_frames(fill=0.3))
    assert np.all(tt.tokens == tt.tokens[0])


def test_single_pixel_lands_in_first_token():
    x = np.zeros((2, 224, 224, 3), dtype=np.float32)
    x[0, 10, 10, 1] = 1.0
    tt = tubelet_tokenize(FrameStack(x))
    nonzero_tokens = np.flatnonzero(np.abs(tt.tokens).sum(axis=1))
    assert list(nonzero_tokens) == [0]
    # frame-major, then row, col, channel
    assert np.flatnonzero(tt.tokens[0]) == [((0 * 16 + 10) * 16 + 10) * 3 + 1]
    assert detokenize(tt).tobytes() == x.tobytes()


def test_brute_force_inverse_mapping():
    rng = np.random.default_rng(1)
    fs = _frames(rng)
    tt = tubelet_tokenize(fs)
    for r, c, f, pr, pc, ch in [(0, 0, 0, 0, 0, 0), (3, 7, 1, 15, 2, 2), (13, 13, 1, 15, 15, 2), (5, 0, 0, 8, 9, 1)]:
        token = r * 14 + c
        offset = ((f * 16 + pr) * 16 + pc) * 3 + ch
        assert tt.tokens[token, offset] == fs.frames[f, r * 16 + pr, c * 16 + pc, ch]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_and_frame_swap(seed):
    fs = _frames(np.random.default_rng(seed))
    tt = tubelet_tokenize(fs)
    assert detokenize(tt).tobytes() == fs.frames.tobytes()
    swapped = tubelet_tokenize(FrameStack(fs.frames[::-1]))
    half = TOKEN_DIM // 2
    np.testing.assert_array_equal(swapped.tokens[:, :half], tt.tokens[:, half:])
    np.testing.assert_array_equal(swapped.tokens[:, half:], tt.tokens[:, :half])


def test_wrong_size_rejected():
    with pytest.raises(ValueError):
        tubelet_tokenize(FrameStack(np.zeros((2, 112, 112, 3))))
    with pytest.raises(ValueError):
        tubelet_tokenize(FrameStack(np.zeros((3, 224, 224, 3))))


def test_sample_frames_twenty_second_clip():
    times = [float(t) for t in range(20)]
    idx = sample_frames(times, 0.0, 20.0, 2, rng_seed=5)
    assert len(idx) == 2 and idx[0] != idx[1]
    assert all(0 <= i <= 19 for i in idx)
    assert sample_frames(times, 0.0, 20.0, 2, rng_seed=5) == idx


def test_sample_frames_repeats_when_short():
    assert sample_frames([0.0], 0.0, 1.0, 2, rng_seed=0) == [0, 0]


def test_sample_frames_eval_mode_even_spacing():
    times = [float(t) for t in range(10)]
    assert sample_frames(times, 0.0, 10.0, 2, rng_seed=None) == [0, 9]


def test_sample_frames_empty_clip_uses_nearest():
    times = [0.0, 1.0, 2.0]
    assert sample_frames(times, 1.2, 1.6, 2, rng_seed=0) == [1, 1]


def test_sample_frames_errors():
    with pytest.raises(ValueError):
        sample_frames([], 0.0, 1.0)
    with pytest.raises(ValueError):
        sample_frames([0.0], 1.0, 1.0)


def test_ppm_roundtrip_and_listing(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "utt1"
    d.mkdir()
    pics = [(rng.random((224, 224, 3)) * 255).astype(np.uint8) for _ in range(2)]
    for t, p in zip([0.0, 1.0], pics):
        write_ppm(d / frame_filename(t), p)
    assert (d / "frame_1.000.ppm").read_bytes()[:2] == b"P6"
    listing = list_frames(d)
    assert [t for t, _ in listing] == [0.0, 1.0]
    assert read_ppm(listing[1][1]).tobytes() == pics[1].tobytes()
    fs = load_frame_stack([p for _, p in listing], [t for t, _ in listing])
    assert fs.frames.shape == (2, 224, 224, 3) and fs.frames.max() <= 1.0
