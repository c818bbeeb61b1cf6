"""Synthetic keyword corpus in the Speech Commands directory layout.

The generator renders crude formant-synthesized "yes", "no" and "stop"
utterances with per-speaker variation in pitch, vocal-tract length, tempo,
onset and loudness, plus a ``_background_noise_`` folder. It exists so the
full pipeline can be exercised without the real corpus; accuracies measured
on it say nothing about the real task.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import NOISE_DIR, SAMPLE_RATE, write_wav

# (kind, duration s, F1 start, F1 end, F2 start, F2 end); kinds: v=voiced, n=nasal,
# s=fricative, c=closure (silence), b=burst
WORDS = {
    "yes": [("v", 0.08, 300, 420, 2250, 2050), ("v", 0.17, 560, 540, 1850, 1750),
            ("s", 0.15, 0, 0, 0, 0)],
    "no": [("n", 0.08, 250, 250, 1100, 1100), ("v", 0.28, 520, 360, 1050, 780)],
    "stop": [("s", 0.12, 0, 0, 0, 0), ("c", 0.05, 0, 0, 0, 0), ("b", 0.012, 0, 0, 0, 0),
             ("v", 0.16, 620, 580, 1080, 980), ("c", 0.06, 0, 0, 0, 0), ("b", 0.012, 0, 0, 0, 0)],
}

NOISE_KINDS = ("white_noise", "pink_noise", "running_tap", "dude_miaowing")


def _band_noise(rng, n, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    spec[(f < lo) | (f > hi)] = 0
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def _voiced(rng, n, f0, f1, f2, formant_scale, nasal=False):
    t = np.linspace(0, 1, n)
    f0_track = f0 * (1 + 0.08 * (0.5 - t)) * (1 + 0.01 * rng.standard_normal())
    F1 = formant_scale * np.interp(t, [0, 1], f1)
    F2 = formant_scale * np.interp(t, [0, 1], f2)
    F3 = formant_scale * 2600.0
    phase = 2 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE
    out = np.zeros(n)
    for h in range(1, int(4000 / f0) + 1):
        fh = h * f0_track
        amp = (np.exp(-0.5 * ((fh - F1) / 90) ** 2) + 0.7 * np.exp(-0.5 * ((fh - F2) / 120) ** 2)
               + 0.3 * np.exp(-0.5 * ((fh - F3) / 150) ** 2))
        if nasal:
            amp = amp * 0.35 + 0.6 * np.exp(-0.5 * ((fh - 250) / 60) ** 2)
        out += amp * np.sin(h * phase)
    env = np.minimum(1, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.01 * SAMPLE_RATE))
    return out * env / (np.std(out) + 1e-12)


def synthesize_word(word: str, rng: np.random.Generator, length: int = SAMPLE_RATE) -> np.ndarray:
    f0 = rng.uniform(90, 230)
    scale = rng.uniform(0.88, 1.15)
    tempo = rng.uniform(0.8, 1.25)
    pieces = []
    for kind, dur, a1, b1, a2, b2 in WORDS[word]:
        n = max(int(dur * tempo * SAMPLE_RATE), 16)
        if kind in "vn":
            pieces.append(_voiced(rng, n, f0, (a1, b1), (a2, b2), scale, nasal=kind == "n"))
        elif kind == "s":
            env = np.sin(np.linspace(0, np.pi, n)) ** 0.5
            pieces.append(0.45 * env * _band_noise(rng, n, 3800 * scale, 7500))
        elif kind == "b":
            pieces.append(0.6 * _band_noise(rng, n, 1500, 6000))
        else:
            pieces.append(np.zeros(n))
    utter = np.concatenate(pieces)
    out = np.zeros(length)
    start = int(rng.uniform(0.05, max(0.06, 1 - len(utter) / length - 0.05)) * length)
    seg = utter[:length - start]
    out[start:start + len(seg)] = seg
    out *= rng.uniform(0.05, 0.4) / (np.max(np.abs(out)) + 1e-12)
    out += rng.uniform(2e-4, 2e-3) * rng.standard_normal(length)
    return np.clip(out, -1, 1)


def synthesize_noise(kind: str, rng: np.random.Generator, seconds: float = 10.0) -> np.ndarray:
    n = int(seconds * SAMPLE_RATE)
    if kind == "white_noise":
        x = rng.standard_normal(n)
    elif kind == "pink_noise":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
        spec[1:] /= np.sqrt(f[1:])
        spec[0] = 0
        x = np.fft.irfft(spec, n)
    elif kind == "running_tap":
        x = _band_noise(rng, n, 300, 5000) * (1 + 0.3 * np.sin(2 * np.pi * 3 * np.arange(n) / SAMPLE_RATE))
    else:
        x = np.zeros(n)
        pos = 0
        while pos < n:
            w = synthesize_word(str(rng.choice(list(WORDS))), rng)
            take = min(n - pos, SAMPLE_RATE)
            x[pos:pos + take] += w[:take]
            pos += int(rng.uniform(0.4, 0.9) * SAMPLE_RATE)
    return 0.3 * x / np.max(np.abs(x))


def make_corpus(root, n_per_class: int = 60, classes=("yes", "no", "stop"), seed: int = 0,
                noise_seconds: float = 10.0) -> Path:
    """Write ``n_per_class`` clips per word plus background-noise files under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for word in classes:
        (root / word).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            speaker = f"{int(rng.integers(0, 16**8)):08x}"
            write_wav(root / word / f"{speaker}_nohash_{i}.wav", synthesize_word(word, rng))
    (root / NOISE_DIR).mkdir(parents=True, exist_ok=True)
    for kind in NOISE_KINDS:
        write_wav(root / NOISE_DIR / f"{kind}.wav", synthesize_noise(kind, rng, noise_seconds))
    return root
