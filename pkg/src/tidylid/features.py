"""Waveform ingestion and log-mel feature extraction."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch, TooShort, UnsupportedFormat

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormat(f"waveform must be mono, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def seconds(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int = 512
    mel_bands: int = 64
    fmin_hz: float = 20.0
    fmax_hz: float = 7600.0
    log_floor: float = 1e-10
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError("need 0 <= fmin_hz < fmax_hz <= sample_rate/2")
        if self.frame_shift_ms > self.frame_length_ms:
            raise ValueError("frame_shift_ms must not exceed frame_length_ms")
        if self.fft_size < self.frame_samples:
            raise ValueError(
                f"fft_size {self.fft_size} shorter than frame ({self.frame_samples} samples)"
            )
        if self.mel_bands < 1 or self.log_floor <= 0:
            raise ValueError("mel_bands must be positive and log_floor > 0")

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_length_ms * self.sample_rate_hz / 1000))

    @property
    def shift_samples(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate_hz / 1000))

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_samples:
            return 0
        return (n_samples - self.frame_samples) // self.shift_samples + 1


def load_wav(path) -> Waveform:
    """Read a 16 kHz mono PCM16 WAV file.

    Raises:
      FileNotFoundError: the path does not exist.
      UnsupportedFormat: anything other than 16-bit PCM, mono, 16 kHz.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise UnsupportedFormat(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    if channels != 1:
        raise UnsupportedFormat(f"{path}: channel count is {channels}, expected mono")
    if width != 2:
        raise UnsupportedFormat(f"{path}: sample width is {8 * width} bits, expected 16")
    if rate != SAMPLE_RATE:
        raise UnsupportedFormat(f"{path}: sample rate is {rate} Hz, expected {SAMPLE_RATE}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(path, wave_or_samples, sample_rate_hz: int = SAMPLE_RATE) -> None:
    if isinstance(wave_or_samples, Waveform):
        samples, sample_rate_hz = wave_or_samples.samples, wave_or_samples.sample_rate_hz
    else:
        samples = wave_or_samples
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate_hz)
        fh.writeframes(to_pcm16(samples).tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: FeatureConfig) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.mel_bands + 2))


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters on the one-sided DFT grid, shape (mel_bands, fft_size//2 + 1)."""
    edges = mel_band_edges(cfg)
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    n_frames = cfg.num_frames(samples.shape[0])
    if n_frames == 0:
        raise TooShort(
            f"{samples.shape[0]} samples is shorter than one frame ({cfg.frame_samples})"
        )
    return np.lib.stride_tricks.sliding_window_view(samples, cfg.frame_samples)[
        :: cfg.shift_samples
    ][:n_frames]


def log_mel(wave_: Waveform, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Log mel-filterbank energies, shape (T, mel_bands).

    Each frame is Hann-windowed, transformed with an ``fft_size`` real DFT,
    and its power spectrum pooled by triangular mel filters before taking
    ``ln(max(energy, log_floor))``.
    """
    cfg = cfg or FeatureConfig()
    if wave_.sample_rate_hz != cfg.sample_rate_hz:
        raise UnsupportedFormat(
            f"sample rate is {wave_.sample_rate_hz} Hz, expected {cfg.sample_rate_hz}"
        )
    frames = frame_signal(wave_.samples, cfg) * np.hanning(cfg.frame_samples + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energy = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energy, cfg.log_floor))


def cmvn(feats: np.ndarray) -> np.ndarray:
    """Per-utterance mean subtraction along time; no variance scaling."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ShapeMismatch(f"expected a non-empty (T, D) matrix, got {feats.shape}")
    return feats - feats.mean(axis=0, keepdims=True)


def featurize(wave_: Waveform, cfg: FeatureConfig | None = None) -> np.ndarray:
    return cmvn(log_mel(wave_, cfg))


def write_features(path, feats: np.ndarray) -> None:
    """Dump a (T, D) matrix as ``LMEL`` + version/T/D u32 header and LE float32 rows."""
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise ShapeMismatch(f"expected (T, D), got {feats.shape}")
    t, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(LMEL_MAGIC + struct.pack("<III", LMEL_VERSION, t, d))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != LMEL_MAGIC:
        raise UnsupportedFormat(f"{path}: missing LMEL header")
    version, t, d = struct.unpack("<III", data[4:16])
    if version != LMEL_VERSION:
        raise UnsupportedFormat(f"{path}: LMEL version {version} not supported")
    body = data[16:]
    if len(body) != 4 * t * d:
        raise UnsupportedFormat(f"{path}: payload size does not match header {t}x{d}")
    return np.frombuffer(body, dtype="<f4").reshape(t, d).copy()
