"""Additive-noise and reverberation augmentation in the waveform domain."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import EmptyImpulse, EmptyPool, EmptySpeech, ZeroEnergyNoise
from .features import Waveform, load_wav, write_wav

KINDS = ("noise", "rir")


@dataclass(frozen=True)
class AugmentConfig:
    apply_probability: float = 0.8
    snr_db_range: tuple[float, float] = (0.0, 20.0)
    noise_pool: str | None = None
    rir_pool: str | None = None
    kinds: tuple[str, ...] = KINDS

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ValueError("snr_db_range must be ordered")
        object.__setattr__(self, "snr_db_range", (float(lo), float(hi)))
        if not self.kinds or any(k not in KINDS for k in self.kinds):
            raise ValueError(f"kinds must be a non-empty subset of {KINDS}")
        object.__setattr__(self, "kinds", tuple(self.kinds))


@lru_cache(maxsize=16)
def load_pool(directory: str) -> tuple[Waveform, ...]:
    """All WAV files of a pool directory, sorted by name."""
    if directory is None:
        return ()
    paths = sorted(Path(directory).glob("*.wav"))
    return tuple(load_wav(p) for p in paths)


def _energy(x):
    return float(np.dot(x, x))


def fit_noise(noise: np.ndarray, length: int, rng) -> np.ndarray:
    """Loop a short noise or take a random crop of a long one."""
    if noise.shape[0] < length:
        reps = -(-length // noise.shape[0])
        return np.tile(noise, reps)[:length]
    start = int(rng.integers(0, noise.shape[0] - length + 1))
    return noise[start : start + length]


def scale_noise(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Noise rescaled so that 10 log10(E_speech / E_noise) equals ``snr_db``."""
    e_noise = _energy(noise)
    if e_noise == 0:
        raise ZeroEnergyNoise("noise segment has zero energy")
    gain = np.sqrt(_energy(speech) / (e_noise * 10.0 ** (snr_db / 10.0)))
    return gain * noise


def _peak_limit(x):
    peak = np.max(np.abs(x))
    return x / peak if peak > 1.0 else x


def mix_noise(speech: Waveform, noise: Waveform, snr_db: float, rng) -> Waveform:
    if len(speech) == 0:
        raise EmptySpeech("speech is empty")
    if _energy(noise.samples) == 0:
        raise ZeroEnergyNoise("noise has zero energy")
    seg = fit_noise(noise.samples, len(speech), rng)
    mixed = speech.samples + scale_noise(speech.samples, seg, snr_db)
    return Waveform(_peak_limit(mixed), speech.sample_rate_hz)


def apply_rir(speech: Waveform, rir: Waveform) -> Waveform:
    """Convolve with an impulse response, keep the first len(speech) samples,
    and rescale to the original peak."""
    if len(rir) == 0:
        raise EmptyImpulse("impulse response is empty")
    x = speech.samples
    if len(x) == 0:
        return speech
    y = fftconvolve(x, rir.samples)[: len(x)]
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return Waveform(y, speech.sample_rate_hz)


def maybe_augment(speech: Waveform, cfg: AugmentConfig, rng, pools=None) -> Waveform:
    """Apply one random perturbation with probability ``apply_probability``.

    ``pools`` may be a ``{"noise": [...], "rir": [...]}`` mapping of
    preloaded waveforms; otherwise the configured directories are read.
    The output depends only on the input, ``cfg`` and the state of ``rng``.
    """
    if cfg.apply_probability == 0.0:
        return speech
    if pools is None:
        pools = {"noise": load_pool(cfg.noise_pool), "rir": load_pool(cfg.rir_pool)}
    for kind in cfg.kinds:
        if not pools.get(kind):
            raise EmptyPool(f"{kind} pool is empty")
    if rng.random() >= cfg.apply_probability:
        return speech
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    pool = pools[kind]
    item = pool[int(rng.integers(len(pool)))]
    if kind == "noise":
        snr = float(rng.uniform(*cfg.snr_db_range))
        return mix_noise(speech, item, snr, rng)
    return apply_rir(speech, item)


def synthetic_noise(n_samples: int, rng, kind: str = "white") -> np.ndarray:
    """White or band-limited Gaussian noise at roughly 0.1 RMS."""
    x = rng.normal(0.0, 1.0, n_samples)
    if kind == "band":
        spec = np.fft.rfft(x)
        f = np.fft.rfftfreq(n_samples, 1 / 16000)
        lo = rng.uniform(100, 2000)
        spec[(f < lo) | (f > lo + rng.uniform(500, 4000))] = 0
        x = np.fft.irfft(spec, n_samples)
    return 0.1 * x / (np.std(x) + 1e-12)


def synthetic_rir(rng, rt60_s: float = 0.3, length_s: float = 0.25, sr: int = 16000) -> np.ndarray:
    """Exponentially decaying Gaussian tail behind a unit direct path."""
    n = int(length_s * sr)
    t = np.arange(n) / sr
    h = rng.normal(0.0, 1.0, n) * np.exp(-6.9 * t / rt60_s) * 0.3
    h[0] = 1.0
    return h / np.max(np.abs(h))


def write_synthetic_pools(root, n_noise=4, n_rir=4, seed=0, seconds=3.0):
    """Populate ``root/noise`` and ``root/rir`` with synthetic WAV files."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    (root / "noise").mkdir(parents=True, exist_ok=True)
    (root / "rir").mkdir(parents=True, exist_ok=True)
    for i in range(n_noise):
        kind = "white" if i % 2 == 0 else "band"
        write_wav(root / "noise" / f"noise_{i:03d}.wav", synthetic_noise(int(seconds * 16000), rng, kind))
    for i in range(n_rir):
        write_wav(root / "rir" / f"rir_{i:03d}.wav", 0.99 * synthetic_rir(rng, rt60_s=rng.uniform(0.15, 0.6)))
    return str(root / "noise"), str(root / "rir")
