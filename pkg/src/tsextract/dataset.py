"""Two-speaker mixture synthesis, manifests, resampling and the log-mel front-end.

Separation runs at 8 kHz and the speaker encoder at 16 kHz, so resampling is
needed in two places: offline when building examples (numpy, via
``resample``) and inside the speaker-consistency loss, where the estimate
must be upsampled differentiably (``resample_torch``).  Both apply the same
windowed-sinc FIR.
"""

from __future__ import annotations

import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import signal

from .audio import ENCODER_RATE, SEPARATOR_RATE, VALID_RATES, AudioError, Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

TARGET_SECONDS = 3
REFERENCE_SECONDS = 2
GAIN_RANGE_DB = (-5.0, 5.0)
CLIP_PEAK = 0.9

# log-mel front-end
MEL_WINDOW = 400  # 25 ms @ 16 kHz
MEL_HOP = 160  # 10 ms
MEL_FFT = 512
N_MELS = 40
MEL_EPS = 1e-6


class UtteranceTooShort(AudioError):
    pass


# --------------------------------------------------------------------------
# resampling


@functools.lru_cache(maxsize=None)
def _lowpass(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc with unit DC gain, cutoff at the lower Nyquist."""
    max_rate = max(up, down)
    half_len = 32 * max_rate
    h = signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", 8.0))
    h.setflags(write=False)
    return h


def _ratio(src: int, dst: int) -> tuple[int, int]:
    g = math.gcd(src, dst)
    return dst // g, src // g


def resampled_length(n: int, src: int, dst: int) -> int:
    return int(math.floor(n * dst / src + 0.5))


def resample(w: Waveform, dst_rate: int) -> Waveform:
    """Band-limited polyphase resampling to 8 or 16 kHz."""
    if dst_rate not in VALID_RATES:
        raise AudioError(f"destination rate {dst_rate} not in {VALID_RATES}")
    if dst_rate == w.sample_rate:
        return Waveform(w.samples.copy(), dst_rate)
    up, down = _ratio(w.sample_rate, dst_rate)
    y = signal.resample_poly(w.samples, up, down, window=_lowpass(up, down))
    n_out = resampled_length(len(w), w.sample_rate, dst_rate)
    y = np.pad(y, (0, max(0, n_out - y.size)))[:n_out]
    return Waveform(y, dst_rate)


def resample_torch(x: torch.Tensor, src_rate: int, dst_rate: int) -> torch.Tensor:
    """Differentiable counterpart of ``resample`` over the last axis.

    Zero-stuffs by ``up``, applies the centred FIR, keeps every ``down``-th
    sample.  This is a fixed linear map, so gradients pass straight through.
    """
    if src_rate == dst_rate:
        return x
    up, down = _ratio(src_rate, dst_rate)
    h = torch.tensor(_lowpass(up, down) * up, dtype=x.dtype, device=x.device)
    lead = x.shape[:-1]
    n = x.shape[-1]
    flat = x.reshape(-1, 1, n)
    if up > 1:
        stuffed = flat.new_zeros(flat.shape[0], 1, n * up)
        stuffed[..., ::up] = flat
    else:
        stuffed = flat
    half = (h.numel() - 1) // 2
    # conv1d is cross-correlation; h is symmetric so no flip is needed
    y = torch.nn.functional.conv1d(stuffed, h.view(1, 1, -1), padding=half)
    y = y[..., ::down]
    n_out = resampled_length(n, src_rate, dst_rate)
    if y.shape[-1] < n_out:
        y = torch.nn.functional.pad(y, (0, n_out - y.shape[-1]))
    return y[..., :n_out].reshape(*lead, n_out)


# --------------------------------------------------------------------------
# log-mel front-end


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = MEL_FFT, sample_rate: int = ENCODER_RATE) -> np.ndarray:
    """HTK-style triangular filters, shape (n_fft // 2 + 1, n_mels)."""
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    lower, centre, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (freqs[:, None] - lower) / (centre - lower)
    falling = (upper - freqs[:, None]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def n_mel_frames(n_samples: int) -> int:
    return (n_samples - MEL_WINDOW) // MEL_HOP + 1


def log_mel(x: torch.Tensor) -> torch.Tensor:
    """Log mel power of a 16 kHz signal, shape (..., frames, 40).

    No centre padding: frames = floor((n - 400) / 160) + 1.
    """
    if x.shape[-1] < MEL_WINDOW:
        raise AudioError(f"need at least {MEL_WINDOW} samples for one mel frame, got {x.shape[-1]}")
    frames = x.unfold(-1, MEL_WINDOW, MEL_HOP)
    window = torch.hann_window(MEL_WINDOW, periodic=True, dtype=x.dtype, device=x.device)
    spectrum = torch.fft.rfft(frames * window, n=MEL_FFT)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    fb = torch.tensor(mel_filterbank(), dtype=x.dtype, device=x.device)
    return torch.log(power @ fb + MEL_EPS)


def log_mel_waveform(w: Waveform) -> np.ndarray:
    if w.sample_rate != ENCODER_RATE:
        raise AudioError(f"log-mel front-end expects {ENCODER_RATE} Hz, got {w.sample_rate}")
    return log_mel(torch.from_numpy(w.samples)).numpy()


# --------------------------------------------------------------------------
# mixing


def mix_pair(a: Waveform, b: Waveform, gain_db: float) -> tuple[Waveform, float]:
    """Sum ``a`` and ``b`` scaled by ``gain_db``, truncated to the shorter input.

    Returns the mixture and the normalization scalar that was applied to it.
    If the mixture peak would exceed 1 it is rescaled to peak 0.9; callers
    must apply the returned scalar to the stored target as well.
    """
    if a.sample_rate != b.sample_rate:
        raise AudioError(f"sample-rate mismatch: {a.sample_rate} vs {b.sample_rate}")
    n = min(len(a), len(b))
    out = a.samples[:n] + 10.0 ** (gain_db / 20.0) * b.samples[:n]
    peak = np.max(np.abs(out))
    scale = CLIP_PEAK / peak if peak > 1.0 else 1.0
    return Waveform(out * scale, a.sample_rate), scale


@dataclass(frozen=True)
class MixtureExample:
    mixture: Waveform
    target: Waveform
    reference: Waveform
    target_speaker_id: str
    interferer_speaker_id: str
    gain_db: float = 0.0
    # source-rate sample ranges inside the target utterance, half-open
    target_region: tuple[int, int] = (0, 0)
    reference_region: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.target_speaker_id == self.interferer_speaker_id:
            raise ValueError("target and interferer must be different speakers")
        if len(self.mixture) != len(self.target):
            raise ValueError("mixture and target lengths differ")


def build_example(
    target_utt: Waveform,
    interferer_utt: Waveform,
    rng_seed,
    target_id: str = "target",
    interferer_id: str = "interferer",
    gain_range: tuple[float, float] = GAIN_RANGE_DB,
) -> MixtureExample:
    """Cut a 3 s target and a disjoint 2 s reference from ``target_utt`` and mix.

    The layout is drawn from ``rng_seed``: the order of the two segments, a
    leading offset and the gap between them, so any slack in the utterance
    is distributed at random while the regions never overlap.
    """
    rate = target_utt.sample_rate
    tgt_len = TARGET_SECONDS * rate
    ref_len = REFERENCE_SECONDS * rate
    if len(target_utt) < tgt_len + ref_len:
        raise UtteranceTooShort(
            f"target utterance is {target_utt.duration:.2f} s, need {TARGET_SECONDS + REFERENCE_SECONDS} s"
        )
    int_len = TARGET_SECONDS * interferer_utt.sample_rate
    if len(interferer_utt) < int_len:
        raise UtteranceTooShort(f"interferer utterance is {interferer_utt.duration:.2f} s, need {TARGET_SECONDS} s")

    rng = np.random.default_rng(rng_seed)
    slack = len(target_utt) - tgt_len - ref_len
    lead = int(rng.integers(0, slack + 1))
    gap = int(rng.integers(0, slack - lead + 1))
    if rng.random() < 0.5:
        tgt_start = lead
        ref_start = lead + tgt_len + gap
    else:
        ref_start = lead
        tgt_start = lead + ref_len + gap
    int_start = int(rng.integers(0, len(interferer_utt) - int_len + 1))
    gain_db = float(rng.uniform(*gain_range))

    target = resample(target_utt.segment(tgt_start, tgt_len), SEPARATOR_RATE)
    interferer = resample(interferer_utt.segment(int_start, int_len), SEPARATOR_RATE)
    reference = resample(target_utt.segment(ref_start, ref_len), ENCODER_RATE)
    mixture, scale = mix_pair(target, interferer, gain_db)
    return MixtureExample(
        mixture=mixture,
        target=Waveform(target.samples * scale, SEPARATOR_RATE),
        reference=reference,
        target_speaker_id=target_id,
        interferer_speaker_id=interferer_id,
        gain_db=gain_db,
        target_region=(tgt_start, tgt_start + tgt_len),
        reference_region=(ref_start, ref_start + ref_len),
    )


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    mixture_path: Path
    target_path: Path
    reference_path: Path
    target_id: str
    interferer_id: str
    gain_db: float

    @property
    def example_id(self) -> str:
        return self.mixture_path.stem.removesuffix("_mix")

    def load(self) -> MixtureExample:
        return MixtureExample(
            mixture=read_wav(self.mixture_path),
            target=read_wav(self.target_path),
            reference=read_wav(self.reference_path),
            target_speaker_id=self.target_id,
            interferer_speaker_id=self.interferer_id,
            gain_db=self.gain_db,
        )


def write_manifest(path, records: list[ManifestRecord]) -> None:
    """Tab-separated, one record per line; paths stored relative to the manifest."""
    path = Path(path)
    root = path.parent.resolve()
    lines = []
    for r in records:
        paths = [Path(p).resolve() for p in (r.mixture_path, r.target_path, r.reference_path)]
        rel = [str(p.relative_to(root)) if p.is_relative_to(root) else str(p) for p in paths]
        lines.append("\t".join([*rel, r.target_id, r.interferer_id, repr(float(r.gain_db))]))
    path.write_text("".join(line + "\n" for line in lines))


def read_manifest(path, check_files: bool = True) -> list[ManifestRecord]:
    path = Path(path)
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        mix, tgt, ref = (root / f for f in fields[:3])
        if check_files:
            missing = [str(p) for p in (mix, tgt, ref) if not p.is_file()]
            if missing:
                raise FileNotFoundError(f"{path}:{lineno}: missing {', '.join(missing)}")
        records.append(ManifestRecord(mix, tgt, ref, fields[3], fields[4], float(fields[5])))
    return records


# --------------------------------------------------------------------------
# corpus -> dataset


def _scan_corpus(corpus_dir: Path) -> dict[str, list[Path]]:
    speakers = {}
    for d in sorted(p for p in corpus_dir.iterdir() if p.is_dir()):
        utts = sorted(d.rglob("*.wav"))
        if utts:
            speakers[d.name] = utts
    return speakers


def _example_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def _synth_one(speakers, out_dir: Path, seed: int, index: int, max_tries: int = 50) -> ManifestRecord:
    rng = np.random.default_rng(_example_seed(seed, index))
    names = list(speakers)
    for _ in range(max_tries):
        t_idx, i_idx = rng.choice(len(names), size=2, replace=False)
        tgt_id, int_id = names[t_idx], names[i_idx]
        tgt_path = speakers[tgt_id][rng.integers(len(speakers[tgt_id]))]
        int_path = speakers[int_id][rng.integers(len(speakers[int_id]))]
        sub_seed = rng.integers(2**63)
        try:
            ex = build_example(read_wav(tgt_path), read_wav(int_path), sub_seed, tgt_id, int_id)
        except UtteranceTooShort as exc:
            log.info("example %d: skipping %s / %s: %s", index, tgt_path.name, int_path.name, exc)
            continue
        stem = out_dir / "wav" / f"{index:06d}"
        rec = ManifestRecord(
            Path(f"{stem}_mix.wav"), Path(f"{stem}_target.wav"), Path(f"{stem}_ref.wav"), tgt_id, int_id, ex.gain_db
        )
        write_wav(rec.mixture_path, ex.mixture)
        write_wav(rec.target_path, ex.target)
        write_wav(rec.reference_path, ex.reference)
        return rec
    raise UtteranceTooShort(f"example {index}: no usable utterance pair after {max_tries} draws")


def synth_dataset(corpus_dir, out_dir, n_examples: int, rng_seed: int, workers: int = 1) -> list[ManifestRecord]:
    """Write ``n_examples`` mixture/target/reference WAV triples plus ``manifest.tsv``.

    Every example draws from its own RNG stream keyed on (seed, index), so
    the output does not depend on ``workers``.
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    speakers = _scan_corpus(corpus_dir)
    if len(speakers) < 2:
        raise ValueError(f"{corpus_dir}: need at least 2 speaker directories with WAVs, found {len(speakers)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    job = functools.partial(_synth_one, speakers, out_dir, rng_seed)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(job, range(n_examples)))
    else:
        records = [job(i) for i in range(n_examples)]
    write_manifest(out_dir / "manifest.tsv", records)
    return records
