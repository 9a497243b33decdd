"""Conditional extraction network: waveform encoder, condition blender, mask
estimator (dual-path transformer, or a compact TCN for the CNN baseline)
and waveform decoder.

Tensor layout follows the usual TasNet convention: waveforms are ``(B, t)``,
latents ``(B, N, T)`` and chunked latents ``(B, N, C, S)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .audio import AudioError

BACKBONES = ("dual_path", "conv_tasnet")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class SeparatorConfig:
    n_filters: int = 64
    kernel_size: int = 16
    stride: int = 8
    embed_dim: int = 256
    backbone: str = "dual_path"
    # dual-path transformer
    n_heads: int = 8
    n_blocks: int = 6
    chunk_size: int = 100
    ffn_hidden: int = 128
    dropout: float = 0.0
    # TCN (conv_tasnet backbone)
    tcn_layers: int = 8
    tcn_repeats: int = 3
    tcn_bottleneck: int = 128
    tcn_hidden: int = 512
    tcn_kernel: int = 3

    def __post_init__(self):
        if self.kernel_size <= self.stride:
            raise ValueError(f"kernel_size ({self.kernel_size}) must exceed stride ({self.stride})")
        if self.n_filters % self.n_heads:
            raise ValueError(f"n_heads ({self.n_heads}) must divide n_filters ({self.n_filters})")
        if self.chunk_size % 2 or self.chunk_size < 2:
            raise ValueError(f"chunk_size must be even and >= 2, got {self.chunk_size}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")

    @classmethod
    def toy(cls, **overrides) -> "SeparatorConfig":
        base = dict(n_blocks=2, chunk_size=16, ffn_hidden=64, tcn_layers=4, tcn_repeats=2,
                    tcn_bottleneck=64, tcn_hidden=128)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def latent_frames(t: int, kernel_size: int = 16, stride: int = 8) -> int:
    return (t - kernel_size) // stride + 1


# --------------------------------------------------------------------------
# encoder / blender / decoder


class WaveformEncoder(nn.Module):
    """Strided 1-D conv with ReLU: ``(B, t) -> (B, N, T)``."""

    def __init__(self, n_filters=64, kernel_size=16, stride=8):
        super().__init__()
        self.conv = nn.Conv1d(1, n_filters, kernel_size, stride=stride)
        self.kernel_size = kernel_size

    def forward(self, x):
        if x.shape[-1] < self.kernel_size:
            raise AudioError(f"input has {x.shape[-1]} samples, need at least {self.kernel_size}")
        return F.relu(self.conv(x.unsqueeze(1)))


class ConditionBlender(nn.Module):
    """Concatenate the embedding (repeated over time) to the latent and mix with a 1x1 conv."""

    def __init__(self, n_filters=64, embed_dim=256):
        super().__init__()
        self.conv = nn.Conv1d(n_filters + embed_dim, n_filters, 1)
        self.n_filters = n_filters
        self.embed_dim = embed_dim

    def forward(self, X, e):
        if X.shape[1] != self.n_filters or e.shape[-1] != self.embed_dim or e.shape[0] != X.shape[0]:
            raise ValueError(
                f"blend expects latent (B, {self.n_filters}, T) and embedding (B, {self.embed_dim}); "
                f"got {tuple(X.shape)} and {tuple(e.shape)}"
            )
        cond = torch.cat([X, e.unsqueeze(-1).expand(-1, -1, X.shape[-1])], dim=1)
        return self.conv(cond)


class WaveformDecoder(nn.Module):
    """Transposed conv back to samples; output length ``(T - 1) * stride + kernel_size``."""

    def __init__(self, n_filters=64, kernel_size=16, stride=8):
        super().__init__()
        self.deconv = nn.ConvTranspose1d(n_filters, 1, kernel_size, stride=stride)

    def forward(self, m):
        return self.deconv(m).squeeze(1)


def apply_mask(X: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    if X.shape != M.shape:
        raise ValueError(f"mask shape {tuple(M.shape)} does not match latent {tuple(X.shape)}")
    return X * M


# --------------------------------------------------------------------------
# segmentation


def chunk(x: torch.Tensor, chunk_size: int) -> torch.Tensor:
    """Split ``(B, N, T)`` into 50%-overlapping chunks ``(B, N, C, S)``.

    The sequence is padded by one hop in front and by one hop plus the
    remainder at the back, so every original frame sits in exactly two
    chunks and S = ceil(T / hop) + 1.
    """
    if chunk_size % 2:
        raise ValueError("chunk_size must be even")
    hop = chunk_size // 2
    T = x.shape[-1]
    back = hop + (hop - T % hop) % hop
    x = F.pad(x, (hop, back))
    return x.unfold(-1, chunk_size, hop).transpose(-1, -2)


def overlap_add(chunks: torch.Tensor, length: int) -> torch.Tensor:
    """Inverse of ``chunk``: sum overlapping chunks, halve, crop to ``length``."""
    B, N, C, S = chunks.shape
    hop = C // 2
    padded = (S + 1) * hop
    folded = F.fold(chunks.reshape(B, N * C, S), output_size=(1, padded), kernel_size=(1, C), stride=(1, hop))
    return 0.5 * folded.view(B, N, padded)[..., hop:hop + length]


# --------------------------------------------------------------------------
# dual-path transformer


class ImprovedTransformerLayer(nn.Module):
    """Self-attention followed by an LSTM feed-forward, each with residual + LayerNorm.

    No positional encoding: the recurrent feed-forward supplies order information.
    """

    def __init__(self, d_model, n_heads, hidden, dropout=0.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.rnn = nn.LSTM(d_model, hidden, batch_first=True, bidirectional=True)
        self.ff = nn.Linear(2 * hidden, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        a, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        f = self.ff(F.relu(self.rnn(x)[0]))
        return self.norm2(x + self.dropout(f))


class DualPathBlock(nn.Module):
    def __init__(self, d_model, n_heads, hidden, dropout=0.0):
        super().__init__()
        self.intra_layer = ImprovedTransformerLayer(d_model, n_heads, hidden, dropout)
        self.inter_layer = ImprovedTransformerLayer(d_model, n_heads, hidden, dropout)

    def intra(self, x):
        # attend within each chunk (over C)
        B, N, C, S = x.shape
        y = x.permute(0, 3, 2, 1).reshape(B * S, C, N)
        y = self.intra_layer(y)
        return y.reshape(B, S, C, N).permute(0, 3, 2, 1)

    def inter(self, x):
        # attend across chunks (over S)
        B, N, C, S = x.shape
        y = x.permute(0, 2, 3, 1).reshape(B * C, S, N)
        y = self.inter_layer(y)
        return y.reshape(B, C, S, N).permute(0, 3, 1, 2)

    def forward(self, x):
        return self.inter(self.intra(x))


def _check_finite(x, where):
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise NonFiniteError(f"{bad} non-finite activations after {where} (shape {tuple(x.shape)})")


class DualPathCore(nn.Module):
    """Mask estimator: norm -> chunk -> B dual-path blocks -> overlap-add -> 1x1 conv -> sigmoid."""

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        N = cfg.n_filters
        self.chunk_size = cfg.chunk_size
        self.norm = nn.GroupNorm(1, N, eps=1e-8)
        self.blocks = nn.ModuleList(
            DualPathBlock(N, cfg.n_heads, cfg.ffn_hidden, cfg.dropout) for _ in range(cfg.n_blocks)
        )
        self.act = nn.PReLU()
        self.head = nn.Conv1d(N, N, 1)

    def forward(self, cond):
        T = cond.shape[-1]
        x = chunk(self.norm(cond), self.chunk_size)
        for i, block in enumerate(self.blocks):
            x = block(x)
            _check_finite(x, f"dual-path block {i}")
        x = overlap_add(self.act(x), T)
        return torch.sigmoid(self.head(x))


# --------------------------------------------------------------------------
# TCN mask estimator for the CNN baseline rows


class _TCNBlock(nn.Module):
    def __init__(self, bottleneck, hidden, kernel, dilation):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(bottleneck, hidden, 1),
            nn.PReLU(),
            nn.GroupNorm(1, hidden, eps=1e-8),
            nn.Conv1d(hidden, hidden, kernel, dilation=dilation, padding=dilation * (kernel - 1) // 2, groups=hidden),
            nn.PReLU(),
            nn.GroupNorm(1, hidden, eps=1e-8),
            nn.Conv1d(hidden, bottleneck, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class ConvTasNetCore(nn.Module):
    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        N, Bn = cfg.n_filters, cfg.tcn_bottleneck
        layers = [nn.GroupNorm(1, N, eps=1e-8), nn.Conv1d(N, Bn, 1)]
        for _ in range(cfg.tcn_repeats):
            layers += [_TCNBlock(Bn, cfg.tcn_hidden, cfg.tcn_kernel, 2 ** i) for i in range(cfg.tcn_layers)]
        layers += [nn.PReLU(), nn.Conv1d(Bn, N, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, cond):
        x = self.net(cond)
        _check_finite(x, "TCN stack")
        return torch.sigmoid(x)


# --------------------------------------------------------------------------


class Separator(nn.Module):
    """``(mixture (B, t), embedding (B, D)) -> (estimate (B, t), masked latent (B, N, T))``."""

    def __init__(self, cfg: SeparatorConfig | None = None):
        super().__init__()
        cfg = cfg or SeparatorConfig()
        self.cfg = cfg
        self.encoder = WaveformEncoder(cfg.n_filters, cfg.kernel_size, cfg.stride)
        self.blender = ConditionBlender(cfg.n_filters, cfg.embed_dim)
        self.core = DualPathCore(cfg) if cfg.backbone == "dual_path" else ConvTasNetCore(cfg)
        self.decoder = WaveformDecoder(cfg.n_filters, cfg.kernel_size, cfg.stride)

    def forward(self, mixture, e):
        B, t = mixture.shape
        T = latent_frames(t, self.cfg.kernel_size, self.cfg.stride)
        X = self.encoder(mixture)
        cond = self.blender(X, e)
        M = self.core(cond)
        if not (X.shape == cond.shape == M.shape == (B, self.cfg.n_filters, T)):
            raise RuntimeError(f"shape pipeline broken: X {tuple(X.shape)}, cond {tuple(cond.shape)}, mask {tuple(M.shape)}")
        m = apply_mask(X, M)
        est = self.decoder(m)
        # crop tail, or zero-pad when t is not on the stride grid
        if est.shape[-1] >= t:
            est = est[..., :t]
        else:
            est = F.pad(est, (0, t - est.shape[-1]))
        return est, m
