"""WAV ingestion, dataset indexing and background-noise mixing."""

from __future__ import annotations

import hashlib
import math
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

SAMPLE_RATE = 16000
CLIP_LENGTH = 16000
NOISE_DIR = "_background_noise_"
TRAIN_FRACTION = 0.7


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)


def canonicalize(samples: np.ndarray, length: int = CLIP_LENGTH) -> np.ndarray:
    """Zero-pad at the end or truncate to exactly ``length`` samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) >= length:
        return samples[:length].copy()
    return np.concatenate([samples, np.zeros(length - len(samples))])


def read_wav(path, canonical: bool = True) -> AudioClip:
    """Read a 16-bit mono 16 kHz PCM WAV file.

    Samples are scaled by 1/32768. With ``canonical`` (the default) the clip is
    padded or truncated to one second; background-noise files are read with
    ``canonical=False`` to keep their full length.
    """
    try:
        with wave.open(os.fspath(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            if channels != 1:
                raise DataError(f"{path}: expected mono audio, got {channels} channels")
            if width != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
            if rate != SAMPLE_RATE:
                raise DataError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if canonical:
        samples = canonicalize(samples)
    return AudioClip(samples)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit mono PCM (values are clipped)."""
    ints = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(ints.tobytes())


@dataclass(frozen=True)
class Entry:
    path: Path
    label: int
    split: str


@dataclass
class DatasetIndex:
    root: Path
    classes: list[str]
    entries: list[Entry]
    noise_files: list[Path] = field(default_factory=list)

    def split(self, tag: str) -> list[Entry]:
        return [e for e in self.entries if e.split == tag]


def _split_key(relpath: str, seed: int) -> bytes:
    return hashlib.blake2b(relpath.encode("utf-8"), digest_size=16,
                           key=str(seed).encode("ascii")).digest()


def index_dataset(root, classes: Sequence[str], seed: int = 0) -> DatasetIndex:
    """Index ``<root>/<label>/*.wav`` and assign each file to train or test.

    Within each class, files are ranked by a keyed hash of their path relative
    to ``root``; the first ``round(0.7 * n)`` go to train. Entries are listed
    in lexicographic path order.
    """
    root = Path(root)
    if not classes:
        raise DataError("class list is empty")
    entries = []
    for label, name in enumerate(classes):
        cdir = root / name
        if not cdir.is_dir():
            raise DataError(f"class directory missing: {cdir}")
        rels = sorted(p.relative_to(root).as_posix() for p in cdir.glob("*.wav"))
        if not rels:
            raise DataError(f"class {name!r} has no .wav files under {cdir}")
        n_train = int(math.floor(TRAIN_FRACTION * len(rels) + 0.5))
        ranked = sorted(rels, key=lambda r: _split_key(r, seed))
        train = set(ranked[:n_train])
        entries.extend(Entry(root / r, label, "train" if r in train else "test") for r in rels)
    entries.sort(key=lambda e: e.path.as_posix())
    noise_dir = root / NOISE_DIR
    noise = sorted(noise_dir.glob("*.wav")) if noise_dir.is_dir() else []
    return DatasetIndex(root, list(classes), entries, noise)


def rms(samples) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("rms of an empty array")
    return float(np.sqrt(np.mean(samples * samples)))


def noise_component(signal: AudioClip, noise: AudioClip, snr_db: float, seed: int,
                    max_tries: int = 10) -> np.ndarray:
    """The scaled noise crop that :func:`mix_at_snr` adds to ``signal``."""
    s = np.asarray(signal.samples, dtype=np.float64)
    n = np.asarray(noise.samples, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return np.zeros_like(s)
    if len(n) < len(s):
        raise DataError(f"noise clip ({len(n)} samples) shorter than signal ({len(s)})")
    s_rms = rms(s)
    if s_rms == 0:
        raise DataError("cannot mix at a finite SNR into a silent signal")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        start = int(rng.integers(0, len(n) - len(s) + 1))
        crop = n[start:start + len(s)]
        n_rms = rms(crop)
        if n_rms > 0:
            alpha = s_rms / (n_rms * 10.0 ** (snr_db / 20.0))
            return alpha * crop
    raise DataError(f"noise crop silent after {max_tries} attempts")


def mix_at_snr(signal: AudioClip, noise: AudioClip, snr_db: float, seed: int) -> AudioClip:
    """Add a random crop of ``noise`` scaled so the mixture has the target SNR.

    ``snr_db = inf`` returns the signal unchanged. No clipping is applied.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return AudioClip(np.array(signal.samples, copy=True), signal.sample_rate)
    comp = noise_component(signal, noise, snr_db, seed)
    return AudioClip(np.asarray(signal.samples, dtype=np.float64) + comp, signal.sample_rate)


def load_clips(entries: Iterable[Entry]) -> list[AudioClip]:
    return [read_wav(e.path) for e in entries]
