"""Log-mel spectrogram front end and span masking.

Framing follows a 25 ms Hamming window with a 10 ms hop over 16 kHz mono
audio, projected onto 80 HTK-mel triangular filters.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPEC_MAGIC = b"AVSP"
_SPEC_HEADER = struct.Struct("<4sIIdd")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D samples)")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def slice(self, start_s: float, end_s: float) -> "Waveform":
        """Samples in [start_s, end_s), clipped to the recording."""
        lo = max(0, int(round(start_s * self.sample_rate_hz)))
        hi = min(len(self.samples), int(round(end_s * self.sample_rate_hz)))
        return Waveform(self.samples[lo:max(lo, hi)], self.sample_rate_hz)


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    mel_fmin_hz: float = 0.0
    mel_fmax_hz: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate_hz: int = 16000) -> None:
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (self.window_ms >= self.hop_ms > 0):
            raise ValueError("require window_ms >= hop_ms > 0")
        if self.fft_size < self.window_samples(sample_rate_hz):
            raise ValueError("fft_size must cover one analysis window")
        if not (self.mel_fmin_hz < self.mel_fmax_hz <= sample_rate_hz / 2):
            raise ValueError("require mel_fmin_hz < mel_fmax_hz <= Nyquist")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def window_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.window_ms * sample_rate_hz / 1000))

    def hop_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.hop_ms * sample_rate_hz / 1000))

    @property
    def floor_value(self) -> float:
        return math.log(self.log_floor)


@dataclass(frozen=True)
class Spectrogram:
    """Matrix of log mel energies, one row per analysis frame.

    Frame ``t`` covers ``[start_time_s + t*hop_seconds, ... + window_seconds)``.
    """

    values: np.ndarray
    hop_seconds: float
    start_time_s: float = 0.0
    window_seconds: float = 0.025
    log_floor: float = 1e-10

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("spectrogram values must be a 2-D [frames x mels] matrix")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]

    @property
    def floor_value(self) -> float:
        return math.log(self.log_floor)

    def frame_centers(self) -> np.ndarray:
        t = np.arange(self.n_frames)
        return self.start_time_s + t * self.hop_seconds + self.window_seconds / 2

    def replace_values(self, values: np.ndarray) -> "Spectrogram":
        return Spectrogram(values, self.hop_seconds, self.start_time_s, self.window_seconds, self.log_floor)


def hamming_window(n: int) -> np.ndarray:
    """Symmetric Hamming window ``0.54 - 0.46 cos(2 pi k / (n - 1))``."""
    if n < 2:
        raise ValueError(f"hamming window needs n >= 2, got {n}")
    k = np.arange(n, dtype=np.float64)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def num_frames(n_samples: int, sample_rate_hz: int, cfg: FeatureConfig) -> int:
    win = cfg.window_samples(sample_rate_hz)
    hop = cfg.hop_samples(sample_rate_hz)
    if n_samples <= win:
        return 1
    return 1 + (n_samples - win) // hop


def frame_signal(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Slice a waveform into overlapping frames.

    Signals shorter than one window are zero-padded on the right to a single
    frame. Trailing samples that do not fill a full hop are dropped.
    """
    if len(w.samples) == 0:
        raise ValueError("cannot frame an empty waveform")
    win = cfg.window_samples(w.sample_rate_hz)
    hop = cfg.hop_samples(w.sample_rate_hz)
    n = num_frames(len(w.samples), w.sample_rate_hz, cfg)
    x = w.samples
    needed = (n - 1) * hop + win
    if len(x) < needed:
        x = np.concatenate([x, np.zeros(needed - len(x))])
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def triangular_filter_weights(freqs_hz: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Evaluate every mel triangle at arbitrary frequencies: ``[n_mels x len(freqs)]``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin_hz), hz_to_mel(cfg.mel_fmax_hz), cfg.n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    f = np.asarray(freqs_hz, dtype=np.float64)[None, :]
    rising = (f - lo) / (center - lo)
    falling = (hi - f) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_filterbank(cfg: FeatureConfig, sample_rate_hz: int = 16000) -> np.ndarray:
    cfg.validate(sample_rate_hz)
    bin_freqs = np.arange(cfg.fft_size // 2 + 1) * sample_rate_hz / cfg.fft_size
    fb = triangular_filter_weights(bin_freqs, cfg)
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{empty.size} mel filters have no FFT bin support; lower n_mels or raise fft_size"
        )
    return fb


def power_spectrum(frames: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    windowed = frames * hamming_window(frames.shape[1])[None, :]
    spec = np.fft.rfft(windowed, n=cfg.fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel_spectrogram(w: Waveform, cfg: FeatureConfig = FeatureConfig(), start_time_s: float = 0.0) -> Spectrogram:
    cfg.validate(w.sample_rate_hz)
    frames = frame_signal(w, cfg)
    mel = power_spectrum(frames, cfg) @ mel_filterbank(cfg, w.sample_rate_hz).T
    values = np.log(np.maximum(cfg.log_floor, mel))
    return Spectrogram(
        values,
        hop_seconds=cfg.hop_samples(w.sample_rate_hz) / w.sample_rate_hz,
        start_time_s=start_time_s,
        window_seconds=cfg.window_samples(w.sample_rate_hz) / w.sample_rate_hz,
        log_floor=cfg.log_floor,
    )


def mask_spans(spec: Spectrogram, spans: Iterable[Sequence[float]]) -> Spectrogram:
    """Silence every frame whose center lies in any half-open ``[start, end)`` span."""
    spans = [(float(a), float(b)) for a, b in spans]
    for a, b in spans:
        if b < a:
            raise ValueError(f"inverted span ({a}, {b})")
    if not spans:
        return spec
    centers = spec.frame_centers()
    hit = np.zeros(spec.n_frames, dtype=bool)
    for a, b in spans:
        hit |= (centers >= a) & (centers < b)
    if not hit.any():
        return spec
    values = spec.values.copy()
    values[hit, :] = spec.floor_value
    return spec.replace_values(values)


def read_wav(path) -> Waveform:
    """Load 16-bit signed little-endian mono 16 kHz PCM into [-1, 1) floats."""
    with wave.open(str(path), "rb") as fh:
        channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
        if fh.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV is not supported")
        if channels != 1:
            raise ValueError(f"{path}: expected mono audio, got {channels} channels")
        if width != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
        if rate != 16000:
            raise ValueError(f"{path}: expected 16000 Hz, got {rate} Hz")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def save_spectrogram(path, spec: Spectrogram) -> None:
    header = _SPEC_HEADER.pack(SPEC_MAGIC, spec.n_frames, spec.n_mels, spec.hop_seconds, spec.start_time_s)
    Path(path).write_bytes(header + spec.values.astype("<f4").tobytes(order="C"))


def load_spectrogram(path, window_seconds: float = 0.025, log_floor: float = 1e-10) -> Spectrogram:
    blob = Path(path).read_bytes()
    if len(blob) < _SPEC_HEADER.size:
        raise ValueError(f"{path}: truncated spectrogram header")
    magic, n_frames, n_mels, hop, start = _SPEC_HEADER.unpack_from(blob)
    if magic != SPEC_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _SPEC_HEADER.size + 4 * n_frames * n_mels
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=_SPEC_HEADER.size).reshape(n_frames, n_mels)
    # f32 rounding can dip just under the float64 floor
    values = np.maximum(values.astype(np.float64), math.log(log_floor))
    return Spectrogram(values, hop, start, window_seconds, log_floor)
