"""MFCC extraction and training-set standardization."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.fft
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import CLIP_LENGTH, SAMPLE_RATE, AudioClip
from .errors import DataError, ShapeError

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class MfccConfig:
    frame_len: int = 400
    hop: int = 160
    fft_size: int = 512
    n_mels: int = 40
    fmin: float = 20.0
    fmax: float = 7600.0
    n_coeffs: int = 20
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.frame_len > self.fft_size:
            raise ValueError("frame_len must not exceed fft_size")
        if self.fmax > self.sample_rate / 2:
            raise ValueError("fmax must not exceed the Nyquist frequency")
        if self.n_coeffs > self.n_mels:
            raise ValueError("n_coeffs must not exceed n_mels")

    @property
    def n_frames(self) -> int:
        return (CLIP_LENGTH - self.frame_len) // self.hop + 1

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_bins(config: MfccConfig) -> np.ndarray:
    """FFT bins of the n_mels + 2 triangle edges (first and last are outer edges)."""
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return np.floor(mel_to_hz(mels) * config.fft_size / config.sample_rate + 0.5).astype(int)


def mel_filterbank(config: MfccConfig) -> np.ndarray:
    """Triangular filters (n_mels x fft_size//2+1), each peaking at 1.0 on its center bin."""
    bins = mel_center_bins(config)
    if np.any(np.diff(bins) <= 0):
        raise ValueError(
            f"{config.n_mels} mel filters are too many for a {config.fft_size}-point FFT "
            f"between {config.fmin} and {config.fmax} Hz (duplicate filter edges)")
    fb = np.zeros((config.n_mels, config.fft_size // 2 + 1))
    k = np.arange(fb.shape[1])
    for m in range(config.n_mels):
        lo, c, hi = bins[m:m + 3]
        rising = (k - lo) / (c - lo)
        falling = (hi - k) / (hi - c)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def frame_signal(samples: np.ndarray, config: MfccConfig) -> np.ndarray:
    return sliding_window_view(samples, config.frame_len)[::config.hop]


def power_spectrum(frames: np.ndarray, config: MfccConfig) -> np.ndarray:
    """One-sided |DFT|^2 of Hann-windowed frames, zero-padded to fft_size."""
    window = scipy.signal.get_window("hann", config.frame_len)
    spec = np.fft.rfft(frames * window, n=config.fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows of the orthonormal DCT-II basis (n_out x n_in)."""
    return scipy.fft.dct(np.eye(n_in), type=2, norm="ortho", axis=0)[:n_out]


def compute_mfcc(clip: AudioClip, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCC feature map of shape 1 x 1 x n_coeffs x n_frames (float32)."""
    samples = np.asarray(clip.samples, dtype=np.float64)
    if samples.shape != (CLIP_LENGTH,):
        raise ShapeError(f"clip must hold {CLIP_LENGTH} samples, got {samples.shape}")
    power = power_spectrum(frame_signal(samples, config), config)
    mel = power @ mel_filterbank(config).T
    logmel = np.log(np.maximum(mel, config.log_floor))
    cep = scipy.fft.dct(logmel, type=2, norm="ortho", axis=-1)[:, :config.n_coeffs]
    return cep.T[None, None].astype(np.float32)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.std, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def fit_normalizer(train_features: Iterable[np.ndarray]) -> NormStats:
    """Per-coefficient mean/std pooled over every frame of every training map."""
    maps = [np.asarray(f, dtype=np.float64) for f in train_features]
    if not maps:
        raise ValueError("cannot fit normalizer on an empty collection")
    # N x coeff x frames -> coeff x (N*frames)
    pooled = np.concatenate([m.reshape(m.shape[-2], m.shape[-1]) for m in maps], axis=1)
    mean = pooled.mean(axis=1)
    std = np.maximum(pooled.std(axis=1), STD_FLOOR)
    # float32 so the stats survive a checkpoint round trip bit-exactly
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def apply_normalizer(fm: np.ndarray, stats: NormStats) -> np.ndarray:
    fm = np.asarray(fm)
    shape = [1] * fm.ndim
    shape[-2] = -1
    mean = stats.mean.astype(np.float64).reshape(shape)
    std = stats.std.astype(np.float64).reshape(shape)
    out = (fm.astype(np.float64) - mean) / std
    return out.astype(np.float32)


# feature cache record: magic, version, reserved, n_coeffs, n_frames
_CACHE_HEADER = struct.Struct("<4sHHII")
_CACHE_MAGIC = b"MFCC"
_CACHE_VERSION = 1


def write_feature_record(path, fm: np.ndarray) -> None:
    fm = np.asarray(fm, dtype="<f4")
    rows, cols = fm.shape[-2:]
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_bytes(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, 0, rows, cols)
                    + fm.reshape(rows, cols).tobytes())
    tmp.replace(path)


def read_feature_record(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise DataError(f"{path}: feature record truncated")
    magic, version, _, rows, cols = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
        raise DataError(f"{path}: not a version-{_CACHE_VERSION} MFCC record")
    payload = data[_CACHE_HEADER.size:]
    if len(payload) != 4 * rows * cols:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {4 * rows * cols}")
    return np.frombuffer(payload, dtype="<f4").reshape(1, 1, rows, cols).astype(np.float32)
