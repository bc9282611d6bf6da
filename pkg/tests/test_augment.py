import numpy as np
import pytest

from tidylid.augment import (
    AugmentConfig,
    apply_rir,
    maybe_augment,
    mix_noise,
    scale_noise,
    synthetic_noise,
    synthetic_rir,
    write_synthetic_pools,
)
from tidylid.errors import EmptyImpulse, EmptyPool, EmptySpeech, ZeroEnergyNoise
from tidylid.features import Waveform


def _snr(speech, noise):
    return 10 * np.log10(np.dot(speech, speech) / np.dot(noise, noise))


@pytest.mark.parametrize("snr", [-5.0, 0.0, 7.3, 20.0])
def test_snr_exact(rng, snr):
    speech = 0.1 * rng.normal(size=3000)
    noise = rng.normal(size=1000)  # shorter: gets looped
    mixed = mix_noise(Waveform(speech), Waveform(noise), snr, rng)
    assert len(mixed) == len(speech)
    added = mixed.samples - speech  # quiet input, no peak limiting kicks in
    assert np.max(np.abs(mixed.samples)) <= 1.0
    assert abs(_snr(speech, added) - snr) < 1e-6


def test_snr_preserved_under_peak_limit(rng):
    speech = 0.9 * np.sign(rng.normal(size=2000))
    noise = rng.normal(size=5000)
    scaled = scale_noise(speech, noise[:2000], 0.0)
    assert abs(_snr(speech, scaled) - 0.0) < 1e-6
    out = mix_noise(Waveform(speech), Waveform(noise), 0.0, rng)
    assert np.max(np.abs(out.samples)) == pytest.approx(1.0)


def test_unit_energies_scale_one():
    s = np.zeros(4)
    s[0] = 1.0
    n = np.zeros(4)
    n[1] = 1.0
    np.testing.assert_allclose(scale_noise(s, n, 0.0), n, atol=1e-15)


def test_noise_errors(rng):
    with pytest.raises(ZeroEnergyNoise):
        mix_noise(Waveform(rng.normal(size=10)), Waveform(np.zeros(10)), 5.0, rng)
    with pytest.raises(EmptySpeech):
        mix_noise(Waveform(np.zeros(0)), Waveform(np.ones(10)), 5.0, rng)


def test_rir_identity_and_shift(rng):
    x = rng.uniform(-0.5, 0.5, 200)
    x[10] = 0.9  # peak away from the tail so the shifted copy keeps it
    assert np.max(np.abs(apply_rir(Waveform(x), Waveform([1.0])).samples - x)) < 1e-9
    h = np.zeros(6)
    h[5] = 1.0
    y = apply_rir(Waveform(x), Waveform(h)).samples
    np.testing.assert_allclose(y[:5], 0.0, atol=1e-12)
    np.testing.assert_allclose(y[5:], x[:-5], atol=1e-9)


def test_rir_matches_naive_convolution(rng):
    x, h = rng.normal(size=32), rng.normal(size=8)
    naive = np.zeros(32)
    for n in range(32):
        for k in range(8):
            if n - k >= 0:
                naive[n] += h[k] * x[n - k]
    naive *= np.max(np.abs(x)) / np.max(np.abs(naive))
    np.testing.assert_allclose(apply_rir(Waveform(x), Waveform(h)).samples, naive, atol=1e-12)


def test_rir_empty():
    with pytest.raises(EmptyImpulse):
        apply_rir(Waveform(np.ones(4)), Waveform(np.zeros(0)))


def _pools(rng):
    return {"noise": [Waveform(synthetic_noise(800, rng))], "rir": [Waveform(synthetic_rir(rng, length_s=0.01))]}


def test_probability_zero_is_identity(rng):
    w = Waveform(rng.normal(size=500) * 0.1)
    out = maybe_augment(w, AugmentConfig(apply_probability=0.0), rng)
    assert out is w


def test_forced_rir_with_unit_impulse(rng):
    w = Waveform(rng.uniform(-0.5, 0.5, 400))
    cfg = AugmentConfig(apply_probability=1.0, kinds=("rir",))
    out = maybe_augment(w, cfg, rng, pools={"rir": [Waveform([1.0])]})
    assert np.max(np.abs(out.samples - w.samples)) < 1e-9


def test_application_rate(rng):
    pools = _pools(rng)
    w = Waveform(np.random.default_rng(0).normal(size=400) * 0.1)
    r = np.random.default_rng(2024)
    cfg = AugmentConfig(apply_probability=0.8)
    applied = sum(maybe_augment(w, cfg, r, pools) is not w for _ in range(10_000))
    assert 0.78 <= applied / 10_000 <= 0.82


def test_deterministic_given_rng_state(rng):
    pools = _pools(rng)
    w = Waveform(rng.normal(size=400) * 0.1)
    cfg = AugmentConfig(apply_probability=0.8)
    a = [maybe_augment(w, cfg, np.random.default_rng(s), pools).samples for s in range(20)]
    b = [maybe_augment(w, cfg, np.random.default_rng(s), pools).samples for s in range(20)]
    assert all(x.tobytes() == y.tobytes() and len(x) == 400 for x, y in zip(a, b))


def test_empty_pool(rng):
    with pytest.raises(EmptyPool):
        maybe_augment(Waveform(np.ones(10)), AugmentConfig(), rng, pools={"noise": [], "rir": []})


def test_pool_directories(tmp_path, rng):
    noise_dir, rir_dir = write_synthetic_pools(tmp_path, n_noise=2, n_rir=2, seconds=0.2)
    cfg = AugmentConfig(apply_probability=1.0, noise_pool=noise_dir, rir_pool=rir_dir)
    w = Waveform(rng.normal(size=1600) * 0.1)
    out = maybe_augment(w, cfg, rng)
    assert len(out) == 1600 and np.max(np.abs(out.samples)) <= 1.0
