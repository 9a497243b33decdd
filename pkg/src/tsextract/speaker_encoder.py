"""Recurrent d-vector speaker encoder (log-mel -> LSTM stack -> projection -> L2 norm)."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .audio import AudioError
from .dataset import MEL_WINDOW, N_MELS, log_mel

EMBED_DIM = 256


class SpeakerEncoder(nn.Module):
    """Map a 16 kHz waveform batch ``(B, n)`` to unit-norm embeddings ``(B, 256)``.

    Args:
        hidden_size: LSTM width (256 at full scale, 64 for toy runs).
        num_layers: depth of the LSTM stack.
        embed_dim: output dimension.
    """

    def __init__(self, hidden_size: int = 256, num_layers: int = 3, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.lstm = nn.LSTM(N_MELS, hidden_size, num_layers=num_layers, batch_first=True)
        self.proj = nn.Linear(hidden_size, embed_dim)
        self.embed_dim = embed_dim

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        if wav.dim() == 1:
            wav = wav.unsqueeze(0)
        if wav.shape[-1] < MEL_WINDOW:
            raise AudioError(f"reference too short for one mel frame: {wav.shape[-1]} < {MEL_WINDOW} samples")
        feats = log_mel(wav)  # B x frames x 40
        out, _ = self.lstm(feats)
        e = F.normalize(self.proj(out[:, -1]), dim=-1, eps=1e-12)
        return e


def cosine(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of unit-norm embeddings (a plain dot product)."""
    return (e1 * e2).sum(-1)
