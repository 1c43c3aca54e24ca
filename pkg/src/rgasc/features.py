"""Log-mel front end: framing, STFT power, triangular mel bank, file I/O."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

CANONICAL_SAMPLE_RATE = 16000
LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1
_LMEL_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class WaveClip:
    clip_id: str
    samples: np.ndarray
    sample_rate: int = CANONICAL_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError(f"clip {self.clip_id!r}: samples must be a non-empty 1-D sequence")
        if self.sample_rate <= 0:
            raise ValueError(f"clip {self.clip_id!r}: sample_rate must be positive")
        if not np.all(np.isfinite(samples)) or np.max(np.abs(samples)) > 1.0:
            raise ValueError(f"clip {self.clip_id!r}: samples must be finite and within [-1, 1]")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 46.0
    overlap_fraction: float = 1.0 / 3.0
    fft_size: int | None = None  # None -> next power of two >= window
    window_kind: str = "hamming"

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(np.floor(self.window_samples(sample_rate) * (1.0 - self.overlap_fraction)))

    def resolved_fft_size(self, sample_rate: int) -> int:
        if self.fft_size is not None:
            return self.fft_size
        n = 1
        while n < self.window_samples(sample_rate):
            n *= 2
        return n

    def validate(self, sample_rate: int) -> None:
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.window_kind not in ("hamming", "rectangular"):
            raise ValueError(f"unknown window_kind {self.window_kind!r}")
        win = self.window_samples(sample_rate)
        if win < 1:
            raise ValueError("window must span at least one sample")
        if win > self.resolved_fft_size(sample_rate):
            raise ValueError(f"window of {win} samples exceeds fft_size {self.fft_size}")
        if self.hop_samples(sample_rate) < 1:
            raise ValueError("hop must be at least one sample")

    def window(self, sample_rate: int) -> np.ndarray:
        n = self.window_samples(sample_rate)
        if self.window_kind == "rectangular":
            return np.ones(n)
        return np.hamming(n)


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int) -> None:
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError(f"need 0 <= fmin < fmax, got fmin={self.fmin}, fmax={self.fmax}")
        if self.fmax > sample_rate / 2:
            raise ValueError(f"fmax={self.fmax} Hz exceeds the Nyquist frequency {sample_rate / 2} Hz")


@dataclass
class LogMel:
    values: np.ndarray  # frames x n_mels
    clip_id: str = ""

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        raise ValueError(f"clip of {n_samples} samples is shorter than one window ({window} samples)")
    return (n_samples - window) // hop + 1


def stft_power(clip: WaveClip, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Squared-magnitude STFT, shape ``(frames, fft_size // 2 + 1)``.

    Frames start at sample 0 with no centre padding; each windowed frame is
    zero-padded to ``fft_size`` before the real FFT.
    """
    sr = clip.sample_rate
    cfg.validate(sr)
    win = cfg.window_samples(sr)
    hop = cfg.hop_samples(sr)
    n_frames = frame_count(len(clip.samples), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, win)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * cfg.window(sr), n=cfg.resolved_fft_size(sr), axis=1)
    return spectrum.real**2 + spectrum.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    edges[0], edges[-1] = cfg.fmin, cfg.fmax  # pin the outer edges against round-trip drift
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig, fft_size: int, sample_rate: int) -> np.ndarray:
    """HTK-scale triangular filters with unit peak, shape ``(n_mels, fft_size // 2 + 1)``."""
    cfg.validate(sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    edges[0], edges[-1] = cfg.fmin, cfg.fmax  # pin the outer edges against round-trip drift
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(bank.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(
            f"mel filters {empty.tolist()} fall between FFT bins; use fewer mels or a larger fft_size"
        )
    return bank


def logmel(clip: WaveClip, stft_cfg: StftConfig = StftConfig(), mel_cfg: MelConfig = MelConfig()) -> LogMel:
    power = stft_power(clip, stft_cfg)
    bank = mel_filterbank(mel_cfg, stft_cfg.resolved_fft_size(clip.sample_rate), clip.sample_rate)
    return LogMel(np.log(power @ bank.T + mel_cfg.log_floor), clip.clip_id)


class LogMelExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer from waveforms to a stacked ``(n, frames, n_mels)`` array."""

    def __init__(self, window_ms=46.0, overlap_fraction=1.0 / 3.0, n_mels=64, fmin=50.0, fmax=8000.0,
                 log_floor=1e-10, sample_rate=CANONICAL_SAMPLE_RATE):
        self.window_ms = window_ms
        self.overlap_fraction = overlap_fraction
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax
        self.log_floor = log_floor
        self.sample_rate = sample_rate

    def configs(self) -> tuple[StftConfig, MelConfig]:
        return (StftConfig(self.window_ms, self.overlap_fraction),
                MelConfig(self.n_mels, self.fmin, self.fmax, self.log_floor))

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        stft_cfg, mel_cfg = self.configs()
        out = []
        for i, item in enumerate(X):
            clip = item if isinstance(item, WaveClip) else WaveClip(str(i), item, self.sample_rate)
            out.append(logmel(clip, stft_cfg, mel_cfg).values)
        if len({v.shape for v in out}) > 1:
            raise ValueError("clips produce different frame counts; trim them to a common length")
        return np.stack(out)


class FeatureNormalizer:
    """Per-mel-band standardisation with statistics from the training set."""

    def __init__(self, mean=None, std=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    def fit(self, features):
        stacked = np.concatenate([np.asarray(f).reshape(-1, np.shape(f)[-1]) for f in features], axis=0)
        self.mean = stacked.mean(axis=0)
        self.std = np.maximum(stacked.std(axis=0), 1e-8)
        return self

    def transform(self, x):
        if self.mean is None:
            raise RuntimeError("FeatureNormalizer is not fitted")
        return (np.asarray(x) - self.mean) / self.std


# --- file formats -----------------------------------------------------------

def read_wav(path, expected_rate: int = CANONICAL_SAMPLE_RATE) -> WaveClip:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: unreadable WAV ({exc})") from exc
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resampling unsupported)")
    if len(raw) != 2 * n or n == 0:
        raise ValueError(f"{path}: truncated or empty sample data")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return WaveClip(path.stem, samples, rate)


def write_wav(path, clip: WaveClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def write_lmel(path, features: LogMel) -> None:
    values = np.ascontiguousarray(features.values, dtype="<f4")
    frames, n_mels = values.shape
    with open(path, "wb") as fh:
        fh.write(_LMEL_HEADER.pack(LMEL_MAGIC, LMEL_VERSION, frames, n_mels))
        fh.write(values.tobytes())


def read_lmel(path) -> LogMel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _LMEL_HEADER.size:
        raise ValueError(f"{path}: file too short for an LMEL header")
    magic, version, frames, n_mels = _LMEL_HEADER.unpack_from(blob)
    if magic != LMEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != LMEL_VERSION:
        raise ValueError(f"{path}: unsupported LMEL version {version}")
    expected = _LMEL_HEADER.size + 4 * frames * n_mels
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {frames}x{n_mels}, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=_LMEL_HEADER.size).reshape(frames, n_mels)
    return LogMel(values.astype(np.float32), path.stem)
