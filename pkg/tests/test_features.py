import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcanetpp import features
from lcanetpp.audio_io import AudioClip
from lcanetpp.errors import DataError
from lcanetpp.features import MfccConfig

CFG = MfccConfig()


def test_mel_scale_closed_form():
    assert features.hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2), abs=1e-9)
    assert features.hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    assert features.mel_to_hz(features.hz_to_mel(1234.5)) == pytest.approx(1234.5)


def test_filterbank_rows():
    fb = features.mel_filterbank(CFG)
    assert fb.shape == (40, 257)
    bins = features.mel_center_bins(CFG)
    for m, row in enumerate(fb):
        assert row.max() == 1.0
        assert np.count_nonzero(row == 1.0) == 1
        assert row[bins[m + 1]] == 1.0
        support = np.flatnonzero(row)
        assert support.min() > bins[m] and support.max() < bins[m + 2]


def test_filterbank_covers_interior():
    fb = features.mel_filterbank(CFG)
    bins = features.mel_center_bins(CFG)
    total = fb.sum(axis=0)
    assert np.all(total[bins[1]:bins[-2] + 1] > 0)


def test_filterbank_rejects_duplicate_centers():
    with pytest.raises(ValueError, match="too many"):
        features.mel_filterbank(MfccConfig(n_mels=200, n_coeffs=20))


def test_config_invariants():
    with pytest.raises(ValueError):
        MfccConfig(frame_len=600)
    with pytest.raises(ValueError):
        MfccConfig(fmax=9000)
    with pytest.raises(ValueError):
        MfccConfig(n_coeffs=41)


def test_zero_clip_closed_form():
    fm = features.compute_mfcc(AudioClip(np.zeros(16000)))
    assert fm.shape == (1, 1, 20, 98)
    np.testing.assert_allclose(fm[0, 0, 0], math.sqrt(40) * math.log(1e-10), rtol=1e-6)
    assert np.max(np.abs(fm[0, 0, 1:])) < 1e-3


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-4, 1.0))
def test_shape_and_determinism(seed, scale):
    clip = AudioClip(np.random.default_rng(seed).uniform(-scale, scale, 16000))
    a = features.compute_mfcc(clip)
    b = features.compute_mfcc(clip)
    assert a.shape == (1, 1, CFG.n_coeffs, CFG.n_frames) == (1, 1, 20, 98)
    assert np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("m", [5, 15, 30])
def test_tone_at_filter_center(m):
    bins = features.mel_center_bins(CFG)
    freq = bins[m + 1] * CFG.sample_rate / CFG.fft_size
    t = np.arange(16000) / 16000
    clip = np.sin(2 * np.pi * freq * t) * 0.5
    frames = features.frame_signal(clip, CFG)
    logmel = np.log(np.maximum(features.power_spectrum(frames, CFG) @ features.mel_filterbank(CFG).T, 1e-10))
    mean = logmel.mean(axis=0)
    far = [j for j in range(40) if abs(j - m) >= 3]
    assert np.all(mean[m] > mean[far])


def test_dct_orthonormal(rng):
    D = features.dct_matrix(40, 40)
    v = rng.standard_normal(40)
    assert np.max(np.abs(D.T @ (D @ v) - v)) < 1e-5


def test_power_spectrum_against_direct_dft(rng):
    frames = rng.standard_normal((8, CFG.frame_len))
    power = features.power_spectrum(frames, CFG)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(CFG.frame_len) / CFG.frame_len)
    n = CFG.fft_size
    k = np.arange(n // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(CFG.frame_len)[None, :] / n)
    for f, p in zip(frames, power):
        w = f * window
        direct = np.abs(basis @ w) ** 2
        assert np.max(np.abs(direct - p)) <= 1e-4 * direct.max()
        # Parseval: full-spectrum energy = n * windowed-frame energy
        full = p[0] + p[-1] + 2 * p[1:-1].sum()
        assert full == pytest.approx(n * np.sum(w ** 2), rel=1e-4)


# --- normalizer ----------------------------------------------------------------

def test_normalizer_standardizes(rng):
    maps = [rng.standard_normal((1, 1, 20, 98)) * rng.uniform(0.5, 3, (20, 1)) + 4 for _ in range(6)]
    stats = features.fit_normalizer(maps)
    pooled = np.concatenate([features.apply_normalizer(m, stats)[0, 0] for m in maps], axis=1)
    assert np.all(np.abs(pooled.mean(axis=1)) < 1e-4)
    assert np.all(np.abs(pooled.std(axis=1) - 1) < 1e-3)


def test_normalizer_mean_map_and_idempotence(rng):
    maps = [rng.standard_normal((1, 1, 4, 10)) * 2 + 1 for _ in range(3)]
    stats = features.fit_normalizer(maps)
    mean_map = np.broadcast_to(stats.mean[:, None], (4, 10))[None, None]
    assert np.max(np.abs(features.apply_normalizer(mean_map, stats))) < 1e-6
    once = features.apply_normalizer(maps[0], stats)
    twice = features.apply_normalizer(once, stats)
    assert not np.allclose(once, twice)


def test_normalizer_degenerate_input():
    stats = features.fit_normalizer([np.full((1, 1, 3, 5), 2.5)])
    np.testing.assert_allclose(stats.std, 1e-6, rtol=1e-6)
    out = features.apply_normalizer(np.full((1, 1, 3, 5), 2.5), stats)
    assert np.all(np.isfinite(out))


def test_normalizer_empty():
    with pytest.raises(ValueError):
        features.fit_normalizer([])


# --- cache record --------------------------------------------------------------

def test_feature_record_round_trip(tmp_path, rng):
    fm = rng.standard_normal((1, 1, 20, 98)).astype(np.float32)
    p = tmp_path / "a.mfcc"
    features.write_feature_record(p, fm)
    data = p.read_bytes()
    assert data[:4] == b"MFCC" and len(data) == 16 + 4 * 20 * 98
    assert features.read_feature_record(p).tobytes() == fm.tobytes()


def test_feature_record_truncated(tmp_path, rng):
    p = tmp_path / "a.mfcc"
    features.write_feature_record(p, rng.standard_normal((1, 1, 2, 3)).astype(np.float32))
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(DataError):
        features.read_feature_record(p)
