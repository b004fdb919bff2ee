"""RGB frame sampling and 16x16x2 tubelet tokenization."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SIZE = 224
PATCH = 16
FRAMES_PER_CLIP = 2
GRID = IMAGE_SIZE // PATCH
N_TOKENS = GRID * GRID
TOKEN_DIM = PATCH * PATCH * FRAMES_PER_CLIP * 3

_FRAME_NAME = re.compile(r"^frame_(\d+(?:\.\d+)?)\.ppm$")


@dataclass(frozen=True)
class FrameStack:
    frames: np.ndarray  # [n_frames, H, W, 3] in [0, 1]
    timestamps_s: tuple = ()

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be [n, H, W, 3], got shape {frames.shape}")
        ts = tuple(float(t) for t in self.timestamps_s)
        if ts and len(ts) != frames.shape[0]:
            raise ValueError("one timestamp per frame required")
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame timestamps must be non-decreasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps_s", ts)


@dataclass(frozen=True)
class TubeletTokens:
    tokens: np.ndarray  # [rows*cols, TOKEN_DIM]
    grid: tuple = (GRID, GRID)


def sample_frames(
    clip_frame_times,
    clip_start_s: float,
    clip_end_s: float,
    count: int = FRAMES_PER_CLIP,
    rng_seed: int | None = 0,
) -> list[int]:
    """Pick ``count`` frame indices that fall inside ``[clip_start_s, clip_end_s)``.

    With a seed the choice is uniform without replacement; ``rng_seed=None``
    selects evenly spaced frames instead (the evaluation-time rule). When the
    clip holds fewer frames than requested the last index is repeated, and a
    clip containing no frame at all falls back to the frame nearest its middle.
    Indices refer to ``clip_frame_times`` and are returned in time order.
    """
    times = np.asarray(list(clip_frame_times), dtype=np.float64)
    if times.size == 0:
        raise ValueError("no frames available")
    if not clip_end_s > clip_start_s:
        raise ValueError("clip_end_s must exceed clip_start_s")
    if count < 1:
        raise ValueError("count must be >= 1")
    inside = np.flatnonzero((times >= clip_start_s) & (times < clip_end_s))
    if inside.size == 0:
        mid = 0.5 * (clip_start_s + clip_end_s)
        inside = np.array([int(np.argmin(np.abs(times - mid)))])
    if inside.size <= count:
        chosen = list(inside)
    elif rng_seed is None:
        pos = np.round(np.linspace(0, inside.size - 1, count)).astype(int)
        chosen = list(inside[pos])
    else:
        rng = np.random.default_rng(rng_seed)
        chosen = sorted(rng.choice(inside, size=count, replace=False))
    chosen = [int(i) for i in chosen]
    return chosen + [chosen[-1]] * (count - len(chosen))


def tubelet_tokenize(fs: FrameStack) -> TubeletTokens:
    """Cut a two-frame stack into 196 tubelets of 16x16 pixels across both frames.

    Token order is raster over the 14x14 grid; inside a token the layout is
    frame-major, then pixel row, pixel column, channel.
    """
    x = fs.frames
    if x.shape != (FRAMES_PER_CLIP, IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(
            f"expected frames of shape {(FRAMES_PER_CLIP, IMAGE_SIZE, IMAGE_SIZE, 3)}, got {x.shape}"
        )
    # [f, gr, pr, gc, pc, ch] -> [gr, gc, f, pr, pc, ch]
    t = x.reshape(FRAMES_PER_CLIP, GRID, PATCH, GRID, PATCH, 3).transpose(1, 3, 0, 2, 4, 5)
    return TubeletTokens(np.ascontiguousarray(t.reshape(N_TOKENS, TOKEN_DIM)), (GRID, GRID))


def detokenize(tt: TubeletTokens) -> np.ndarray:
    """Inverse of :func:`tubelet_tokenize`."""
    t = np.asarray(tt.tokens).reshape(GRID, GRID, FRAMES_PER_CLIP, PATCH, PATCH, 3)
    return np.ascontiguousarray(
        t.transpose(2, 0, 3, 1, 4, 5).reshape(FRAMES_PER_CLIP, IMAGE_SIZE, IMAGE_SIZE, 3)
    )


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PPM" or im.mode != "RGB":
            raise ValueError(f"{path}: expected binary RGB PPM, got {im.format}/{im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PPM")


def frame_filename(t_s: float) -> str:
    return f"frame_{t_s:.3f}.ppm"


def list_frames(frames_dir) -> list[tuple[float, Path]]:
    """``(timestamp, path)`` pairs for every ``frame_<seconds>.ppm`` in a directory."""
    out = []
    for p in Path(frames_dir).iterdir():
        m = _FRAME_NAME.match(p.name)
        if m:
            out.append((float(m.group(1)), p))
    out.sort()
    return out


def load_frame_stack(paths, timestamps) -> FrameStack:
    pixels = np.stack([read_ppm(p) for p in paths]).astype(np.float32) / 255.0
    return FrameStack(pixels, tuple(timestamps))
