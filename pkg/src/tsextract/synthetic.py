"""Toy speech corpus: harmonic "voices" with speaker-specific pitch and formants.

Stands in for LibriSpeech in tests and demos.  Each speaker has a pitch
range, a vocal-tract scale (shifts all formants) and a spectral tilt;
utterances are strings of vowel-like syllables separated by short pauses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import ENCODER_RATE, Waveform, write_wav

# (F1, F2, F3) in Hz for a handful of vowels, adult male reference
VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [530, 1840, 2480],
    [660, 1720, 2410],
    [300, 870, 2240],
    [570, 840, 2410],
    [440, 1020, 2240],
])


@dataclass(frozen=True)
class Voice:
    f0: float
    tract_scale: float
    tilt: float
    bandwidth: float


def random_voice(rng: np.random.Generator) -> Voice:
    return Voice(
        f0=float(rng.uniform(90, 240)),
        tract_scale=float(rng.uniform(0.85, 1.25)),
        tilt=float(rng.uniform(0.6, 1.4)),
        bandwidth=float(rng.uniform(60, 140)),
    )


def utterance(voice: Voice, seconds: float, rng: np.random.Generator, sample_rate: int = ENCODER_RATE) -> Waveform:
    n = int(seconds * sample_rate)
    f0 = np.empty(n)
    formants = np.empty((n, 3))
    env = np.zeros(n)
    pos = 0
    while pos < n:
        syl = int(rng.uniform(0.12, 0.32) * sample_rate)
        pause = int(rng.uniform(0.0, 0.08) * sample_rate)
        end = min(pos + syl, n)
        k = end - pos
        contour = voice.f0 * (1 + 0.12 * rng.standard_normal()) * np.linspace(1.0, rng.uniform(0.85, 1.15), k)
        f0[pos:end] = contour
        formants[pos:end] = VOWELS[rng.integers(len(VOWELS))] * voice.tract_scale
        env[pos:end] = np.sin(np.pi * np.arange(k) / k) ** 0.5
        stop = min(end + pause, n)
        f0[end:stop] = contour[-1]
        formants[end:stop] = formants[end - 1]
        pos = stop
    # smooth parameter tracks to avoid clicks at syllable joins
    kernel = np.hanning(int(0.02 * sample_rate))
    kernel /= kernel.sum()
    f0 = np.convolve(f0, kernel, mode="same")
    formants = np.stack([np.convolve(formants[:, j], kernel, mode="same") for j in range(3)], axis=1)

    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(0.45 * sample_rate / voice.f0)
    out = np.zeros(n)
    for h in range(1, n_harm + 1):
        freq = h * f0
        resonance = sum(1.0 / (1.0 + ((freq - formants[:, j]) / voice.bandwidth) ** 2) for j in range(3))
        amp = resonance * h ** (-voice.tilt) * (freq < 0.48 * sample_rate)
        out += amp * np.sin(h * phase)
    out *= env
    out += 0.003 * rng.standard_normal(n)
    out *= 0.5 / (np.max(np.abs(out)) + 1e-12)
    return Waveform(out, sample_rate)


def write_corpus(root, n_speakers: int, utts_per_speaker: int, seconds: float = 6.0, seed: int = 0,
                 sample_rate: int = ENCODER_RATE) -> dict[str, Voice]:
    """Write ``root/spkNNN/uttNNN.wav`` and return the voices used."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    voices = {}
    for s in range(n_speakers):
        name = f"spk{s:03d}"
        voice = random_voice(rng)
        voices[name] = voice
        for u in range(utts_per_speaker):
            write_wav(root / name / f"utt{u:03d}.wav", utterance(voice, seconds, rng, sample_rate))
    return voices
