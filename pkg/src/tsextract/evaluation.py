"""SDRi / SI-SNRi evaluation over a manifest, and single-file extraction.

SDR here is the plain energy ratio ||s||^2 / ||s - est||^2, *not* the
BSS-Eval SDR with a distortion filter.  Numbers are not comparable with
BSS-Eval figures.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import ENCODER_RATE, SEPARATOR_RATE, AudioError, Waveform, read_wav, write_wav
from .dataset import read_manifest, resample
from .objectives import DB_CAP, EPS, si_snr
from .trainer import Trainer, load_checkpoint

log = logging.getLogger(__name__)

REPORT_SCHEMA = "tsextract.eval/1"
ROW_KEYS = ("id", "si_snr_in", "si_snr_out", "si_snri", "sdr_in", "sdr_out", "sdri")


def _as64(x):
    if isinstance(x, Waveform):
        x = x.samples
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float64)


def sdr(s, est) -> float:
    """Energy-ratio SDR in dB, capped at 80 dB.  Not scale-invariant."""
    s, est = _as64(s), _as64(est)
    if s.shape[-1] != est.shape[-1]:
        raise ValueError(f"length mismatch: reference {s.shape[-1]} vs estimate {est.shape[-1]}")
    energy = float((s ** 2).sum())
    if energy == 0:
        raise ValueError("reference signal has zero energy; SDR is undefined")
    err = float(((s - est) ** 2).sum())
    return float(np.clip(10 * np.log10(energy / (err + EPS)), -DB_CAP, DB_CAP))


def si_snr_db(s, est) -> float:
    return float(si_snr(_as64(s), _as64(est)))


METRICS = {"sdr": sdr, "si_snr": si_snr_db}


def improvement(metric, s, est, mixture) -> float:
    """``metric(s, est) - metric(s, mixture)``; ``metric`` is a callable or a name in ``METRICS``."""
    fn = METRICS[metric] if isinstance(metric, str) else metric
    return fn(s, est) - fn(s, mixture)


def extract_waveform(trainer: Trainer, mixture: Waveform, reference: Waveform) -> Waveform:
    """Run the extractor on one mixture; the output has the mixture's length at 8 kHz."""
    mixture = resample(mixture, SEPARATOR_RATE)
    reference = resample(reference, ENCODER_RATE)
    dtype = trainer.config.torch_dtype
    est = trainer.extract(
        torch.from_numpy(mixture.samples).to(dtype).unsqueeze(0),
        torch.from_numpy(reference.samples).to(dtype).unsqueeze(0),
    )
    return Waveform(est[0].to(torch.float64).numpy(), SEPARATOR_RATE)


@dataclass
class EvalReport:
    rows: list[dict]
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows, config=None, missing=None) -> "EvalReport":
        rows = sorted(rows, key=lambda r: r["id"])
        agg = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in ROW_KEYS[1:]}
        agg["n"] = len(rows)
        return cls(rows, agg, config or {}, list(missing or []))

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        data = json.loads(Path(path).read_text())
        if data.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"{path}: not an evaluation report (schema {data.get('schema')!r})")
        return cls(data["rows"], data["aggregate"], data.get("config", {}), data.get("missing", []))


def render_table(report: EvalReport) -> str:
    header = f"{'id':<16}" + "".join(f"{k:>12}" for k in ROW_KEYS[1:])
    lines = [header, "-" * len(header)]
    for r in report.rows:
        lines.append(f"{r['id']:<16}" + "".join(f"{r[k]:>12.2f}" for k in ROW_KEYS[1:]))
    lines.append("-" * len(header))
    agg = report.aggregate
    lines.append(f"{'mean (n=%d)' % agg.get('n', 0):<16}" + "".join(f"{agg[k]:>12.2f}" for k in ROW_KEYS[1:]))
    if report.missing:
        lines.append("")
        lines.append(f"skipped {len(report.missing)} example(s) with missing files:")
        lines.extend(f"  {m}" for m in report.missing)
    return "\n".join(lines)


def evaluate(manifest, checkpoint, out=None) -> EvalReport:
    """Score every manifest example; missing files are reported and skipped.

    With ``out`` set, writes the JSON report there and a rendered table
    next to it (same stem, ``.txt``).
    """
    trainer = checkpoint if isinstance(checkpoint, Trainer) else load_checkpoint(checkpoint)
    rows, missing = [], []
    for rec in read_manifest(manifest, check_files=False):
        absent = [str(p) for p in (rec.mixture_path, rec.target_path, rec.reference_path) if not p.is_file()]
        if absent:
            missing.extend(absent)
            log.warning("%s: missing %s", rec.example_id, ", ".join(absent))
            continue
        ex = rec.load()
        est = extract_waveform(trainer, ex.mixture, ex.reference)
        s, i = ex.target.samples, ex.mixture.samples
        row = {"id": rec.example_id}
        row["si_snr_in"], row["si_snr_out"] = si_snr_db(s, i), si_snr_db(s, est)
        row["sdr_in"], row["sdr_out"] = sdr(s, i), sdr(s, est)
        row["si_snri"] = row["si_snr_out"] - row["si_snr_in"]
        row["sdri"] = row["sdr_out"] - row["sdr_in"]
        rows.append(row)
    report = EvalReport.from_rows(rows, trainer.config.to_dict(), missing)
    if out is not None:
        out = report.save(out)
        out.with_suffix(".txt").write_text(render_table(report) + "\n")
    return report


def extract_file(mixture_wav, reference_wav, checkpoint, out_wav) -> Waveform:
    """Extract the reference speaker from ``mixture_wav`` and write 16-bit PCM at 8 kHz."""
    trainer = checkpoint if isinstance(checkpoint, Trainer) else load_checkpoint(checkpoint)
    try:
        mixture = read_wav(mixture_wav)
        reference = read_wav(reference_wav)
    except AudioError as exc:
        raise AudioError(f"cannot read inputs ({mixture_wav}, {reference_wav}): {exc}") from exc
    est = extract_waveform(trainer, mixture, reference)
    write_wav(out_wav, est)
    return est
