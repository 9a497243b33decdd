"""Waveform container and 16-bit PCM WAV I/O."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SEPARATOR_RATE = 8000
ENCODER_RATE = 16000
VALID_RATES = (SEPARATOR_RATE, ENCODER_RATE)

_PCM_SCALE = 32767.0


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono audio at 8 or 16 kHz.

    Samples are stored as a 1-D float64 array. Amplitudes are expected in
    [-1, 1] but only finiteness is enforced, since intermediate signals
    (e.g. a mixture before peak normalization) may exceed unit range.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise AudioError(f"expected mono 1-D samples, got shape {x.shape}")
        if x.size == 0:
            raise AudioError("waveform is empty")
        if not np.all(np.isfinite(x)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate not in VALID_RATES:
            raise AudioError(f"sample rate {self.sample_rate} not in {VALID_RATES}")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def segment(self, start: int, length: int) -> "Waveform":
        if start < 0 or start + length > len(self):
            raise AudioError(f"segment [{start}, {start + length}) outside waveform of length {len(self)}")
        return Waveform(self.samples[start:start + length], self.sample_rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.round(np.clip(samples, -1.0, 1.0) * _PCM_SCALE).astype("<i2")


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot decode {path}: {exc}") from exc
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / _PCM_SCALE
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    try:
        return Waveform(samples, int(rate))
    except AudioError as exc:
        raise AudioError(f"{path}: {exc}") from exc


def write_wav(path, wave: Waveform) -> None:
    """Write 16-bit PCM atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        wavfile.write(tmp, wave.sample_rate, to_pcm16(wave.samples))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
