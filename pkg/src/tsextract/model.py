from __future__ import annotations

import torch
from torch import nn

from .separator import Separator, SeparatorConfig
from .speaker_encoder import SpeakerEncoder


class TargetSpeakerExtractor(nn.Module):
    """Speaker encoder + separator: ``(mixture @8k, reference @16k) -> (estimate, masked latent, embedding)``."""

    def __init__(self, sep_cfg: SeparatorConfig | None = None, encoder_hidden: int = 256, encoder_layers: int = 3):
        super().__init__()
        sep_cfg = sep_cfg or SeparatorConfig()
        self.speaker_encoder = SpeakerEncoder(encoder_hidden, encoder_layers, sep_cfg.embed_dim)
        self.separator = Separator(sep_cfg)

    def forward(self, mixture, reference):
        e = self.speaker_encoder(reference)
        est, m = self.separator(mixture, e)
        return est, m, e


def init_weights(module: nn.Module) -> None:
    """Fan-in uniform for conv/linear layers, orthogonal recurrent matrices, zero biases."""
    for mod in module.modules():
        if isinstance(mod, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
            bound = mod.weight[0].numel() ** -0.5
            nn.init.uniform_(mod.weight, -bound, bound)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.LSTM):
            for name, p in mod.named_parameters():
                if name.startswith("weight_hh"):
                    for gate in p.data.chunk(4, 0):
                        nn.init.orthogonal_(gate)
                elif name.startswith("weight_ih"):
                    nn.init.xavier_uniform_(p)
                else:
                    nn.init.zeros_(p)


def parameter_groups(model: TargetSpeakerExtractor) -> dict[str, list[nn.Parameter]]:
    """Named parameter sets used for ablation wiring checks."""
    sep = model.separator
    return {
        "speaker_encoder": list(model.speaker_encoder.parameters()),
        "waveform_encoder": list(sep.encoder.parameters()),
        "blender": list(sep.blender.parameters()),
        "core": list(sep.core.parameters()),
        "waveform_decoder": list(sep.decoder.parameters()),
    }


@torch.no_grad()
def snapshot(params) -> list[torch.Tensor]:
    return [p.detach().clone() for p in params]
