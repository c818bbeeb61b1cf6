"""
From waveform to normalized MFCC map
====================================

Synthesize a keyword, mix background noise at a controlled SNR, and follow
the clip through MFCC extraction and standardization.
"""

import numpy as np

from lcanetpp import audio_io, features, synth
from lcanetpp.audio_io import AudioClip

rng = np.random.default_rng(1)
clip = AudioClip(synth.synthesize_word("stop", rng))
noise = AudioClip(synth.synthesize_noise("running_tap", rng, seconds=3))
print("clip rms", round(audio_io.rms(clip.samples), 4), "samples", len(clip))

# The mixture hits the requested SNR exactly.
for snr in (25, 20, 15):
    mixed = audio_io.mix_at_snr(clip, noise, snr, seed=7)
    added = mixed.samples - clip.samples
    measured = 20 * np.log10(audio_io.rms(clip.samples) / audio_io.rms(added))
    print(f"target {snr} dB  measured {measured:.4f} dB")
assert np.array_equal(audio_io.mix_at_snr(clip, noise, np.inf, 7).samples, clip.samples)

cfg = features.MfccConfig()
fm = features.compute_mfcc(clip, cfg)
print("feature map", fm.shape, fm.dtype)
print("filterbank", features.mel_filterbank(cfg).shape, "centers (bins)",
      features.mel_center_bins(cfg)[1:6], "...")

# Standardize with statistics from a small "training set".
train = [features.compute_mfcc(AudioClip(synth.synthesize_word(w, rng)), cfg)
         for w in ("yes", "no", "stop") * 10]
stats = features.fit_normalizer(train)
z = features.apply_normalizer(fm, stats)
print("coefficient means before", np.round(fm[0, 0, :4].mean(axis=1), 2),
      "after", np.round(z[0, 0, :4].mean(axis=1), 2))
noisy = features.apply_normalizer(
    features.compute_mfcc(audio_io.mix_at_snr(clip, noise, 15, 7), cfg), stats)
print("mean |change| in normalized features at 15 dB:", round(float(np.abs(noisy - z).mean()), 3))
