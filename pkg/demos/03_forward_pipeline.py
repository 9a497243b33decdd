"""
One mixture through the extractor
=================================

Follows a 3 s mixture through the waveform encoder, the conditioning
blender, the dual-path mask network and the decoder, printing shapes at
each stage.
"""

import torch

from tsextract.model import TargetSpeakerExtractor
from tsextract.separator import SeparatorConfig, chunk, latent_frames

torch.manual_seed(0)
model = TargetSpeakerExtractor(SeparatorConfig()).eval()
sep = model.separator
n_params = sum(p.numel() for p in model.parameters())
print(f"{n_params / 1e6:.2f} M parameters")

mixture = 0.1 * torch.randn(1, 24000)  # 3 s at 8 kHz
reference = 0.1 * torch.randn(1, 32000)  # 2 s at 16 kHz

with torch.no_grad():
    e = model.speaker_encoder(reference)
    print("embedding", tuple(e.shape), "norm", round(float(e.norm()), 6))

    X = sep.encoder(mixture)
    print("latent", tuple(X.shape), "frames expected", latent_frames(24000))

    Y = sep.blender(X, e)
    print("blended", tuple(Y.shape))

    # The core cuts the latent into half-overlapping chunks before attending within and across them.
    print("chunks", tuple(chunk(Y, sep.core.chunk_size).shape))

    M = sep.core(Y)
    print("mask", tuple(M.shape), f"range [{float(M.min()):.3f}, {float(M.max()):.3f}]")

    est, m = sep(mixture, e)
    print("masked latent", tuple(m.shape), "estimate", tuple(est.shape))

# Any mixture length of at least one kernel works; the output always matches the input.
for n in (16, 1000, 12345):
    with torch.no_grad():
        out, _, _ = model(0.1 * torch.randn(1, n), reference)
    print(n, "->", out.shape[-1])
