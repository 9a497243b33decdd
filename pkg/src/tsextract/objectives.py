"""Training objectives and the multi-scale waveform discriminator.

Generator side: negative SI-SNR reconstruction loss, speaker-embedding
consistency, encoder/decoder inverse consistency and the least-squares
adversarial term.  Discriminator side: the least-squares real/fake loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .audio import ENCODER_RATE, SEPARATOR_RATE
from .dataset import resample_torch

EPS = 1e-8
DB_CAP = 80.0

COMPONENTS = ("wrql", "secl", "icl", "adv_g")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


def _zero_mean(x):
    return x - x.mean(dim=-1, keepdim=True)


def si_snr(s: torch.Tensor, est: torch.Tensor) -> torch.Tensor:
    """Scale-invariant SNR in dB over the last axis, clamped to +-80 dB.

    Both signals are made zero-mean first.  ``s`` is the reference.
    """
    s, est = torch.as_tensor(s), torch.as_tensor(est)
    if s.shape[-1] != est.shape[-1]:
        raise ValueError(f"length mismatch: reference {s.shape[-1]} vs estimate {est.shape[-1]}")
    s, est = _zero_mean(s), _zero_mean(est)
    energy = (s * s).sum(-1, keepdim=True)
    if (energy == 0).any():
        raise ValueError("reference signal has zero energy; SI-SNR is undefined")
    s_target = (est * s).sum(-1, keepdim=True) / energy * s
    e_noise = est - s_target
    ratio = ((s_target ** 2).sum(-1) + EPS) / ((e_noise ** 2).sum(-1) + EPS)
    return torch.clamp(10 * torch.log10(ratio), -DB_CAP, DB_CAP)


def wrql(s, est):
    """Waveform reconstruction loss: batch mean of -SI-SNR."""
    return -si_snr(s, est).mean()


def secl(reference, est, speaker_encoder, ref_embedding=None):
    """Squared distance between embeddings of the 16 kHz reference and the 8 kHz estimate.

    ``est`` is upsampled to 16 kHz differentiably before embedding.  Pass
    ``ref_embedding`` to reuse an embedding already computed for conditioning;
    gradients then flow through it as well.
    """
    e_ref = speaker_encoder(reference) if ref_embedding is None else ref_embedding
    e_est = speaker_encoder(resample_torch(est, SEPARATOR_RATE, ENCODER_RATE))
    return ((e_ref - e_est) ** 2).sum(-1).mean()


def icl(m, waveform_encoder, waveform_decoder):
    """Mean squared round-trip error ``m`` vs ``WE(WD(m))``."""
    rt = waveform_encoder(waveform_decoder(m))
    if rt.shape != m.shape:
        raise ValueError(f"encoder/decoder round trip changed shape {tuple(m.shape)} -> {tuple(rt.shape)}")
    return ((m - rt) ** 2).mean()


# --------------------------------------------------------------------------
# discriminator


def _receptive_field(layers):
    rf, jump = 1, 1
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf


class ScaleDiscriminator(nn.Module):
    """Strided grouped conv stack with leaky ReLUs and a 3-tap head, mean-pooled to a score."""

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.convs = nn.ModuleList([
            nn.Conv1d(1, c1, 15, 1, padding=7),
            nn.Conv1d(c1, c2, 41, 4, padding=20, groups=max(1, c1 // 4)),
            nn.Conv1d(c2, c3, 41, 4, padding=20, groups=max(1, c2 // 4)),
            nn.Conv1d(c3, c4, 5, 1, padding=2),
        ])
        self.head = nn.Conv1d(c4, 1, 3, 1, padding=1)
        self.receptive_field = _receptive_field([(15, 1), (41, 4), (41, 4), (5, 1), (3, 1)])

    def forward(self, x):
        x = x.unsqueeze(1)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x).mean(dim=(1, 2))


class MultiScaleDiscriminator(nn.Module):
    """Three sub-discriminators on the raw, 2x- and 4x-average-pooled waveform.

    Returns unbounded scores of shape ``(B, 3)``.
    """

    scales = (1, 2, 4)

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        self.discriminators = nn.ModuleList(ScaleDiscriminator(channels) for _ in self.scales)
        self.min_length = max(s * d.receptive_field for s, d in zip(self.scales, self.discriminators))

    def forward(self, w):
        if w.shape[-1] < self.min_length:
            raise ValueError(f"discriminator input has {w.shape[-1]} samples, receptive field needs {self.min_length}")
        scores = []
        for scale, d in zip(self.scales, self.discriminators):
            x = w if scale == 1 else F.avg_pool1d(w.unsqueeze(1), scale, scale).squeeze(1)
            scores.append(d(x))
        return torch.stack(scores, dim=-1)


def disc_loss(D, s, est):
    """Least-squares discriminator loss; the estimate is detached."""
    real = D(s)
    fake = D(est.detach())
    return ((real - 1) ** 2 + fake ** 2).mean()


def gen_adv_loss(D, est):
    """Least-squares generator loss: push D(estimate) towards 1."""
    return ((D(est) - 1) ** 2).mean()


# --------------------------------------------------------------------------
# weighting


@dataclass(frozen=True)
class LossWeights:
    wrql: float = 1.0
    secl: float = 1.0
    icl: float = 1.0
    adv_g: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossValue:
    total: torch.Tensor
    parts: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * v for k, v in self.parts.items())


def total_generator_loss(parts: dict, weights: LossWeights = LossWeights()) -> LossValue:
    """Weighted sum of the generator loss components present in ``parts``."""
    total = None
    logged, used = {}, {}
    for name, value in parts.items():
        if name not in COMPONENTS:
            raise KeyError(f"unknown loss component {name!r}")
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        w = getattr(weights, name)
        term = w * value
        total = term if total is None else total + term
        logged[name], used[name] = v, w
    if total is None:
        raise ValueError("no loss components given")
    return LossValue(torch.as_tensor(total), logged, used)
