"""
Training objectives at their fixed points
=========================================

SI-SNR drives reconstruction; the embedding distance, latent round-trip
error and least-squares adversarial terms shape the rest.  Each is
evaluated here on inputs where the answer is known by hand.
"""

import torch

from tsextract.evaluation import sdr
from tsextract.model import init_weights
from tsextract.objectives import (
    MultiScaleDiscriminator,
    disc_loss,
    gen_adv_loss,
    icl,
    secl,
    si_snr,
    total_generator_loss,
)
from tsextract.separator import WaveformDecoder, WaveformEncoder
from tsextract.speaker_encoder import SpeakerEncoder

torch.manual_seed(0)
torch.set_grad_enabled(False)
f64 = dict(dtype=torch.float64)

# Half the estimate's energy lies along the target, half is orthogonal: 0 dB.
s = torch.tensor([1.0, -1, 1, -1], **f64)
print("SI-SNR hand case:", float(si_snr(s, torch.tensor([1.0, -1, 0, 0], **f64))), "dB")

# Gain and DC offset do not matter to SI-SNR, but they do to the energy-ratio SDR.
x = torch.randn(8000, **f64)
est = x + 0.3 * torch.randn(8000, **f64)
print(f"SI-SNR {float(si_snr(x, est)):.2f} dB; after x3 gain and +0.2 offset {float(si_snr(x, 3 * est + 0.2)):.2f} dB")
print(f"SDR(s, 2s) = {sdr(x, 2 * x):.2f} dB while SI-SNR(s, 2s) = {float(si_snr(x, 2 * x)):.0f} dB (cap)")

# Embedding distance: zero when the estimate is the reference itself.
encoder = SpeakerEncoder(hidden_size=32).double()
init_weights(encoder)
ref = 0.1 * torch.randn(1, 32000, **f64)
est8k = 0.1 * torch.randn(1, 24000, **f64)
print(f"SECL for an unrelated estimate: {float(secl(ref, est8k, encoder)):.4f}")

# Latent round trip through decoder then encoder; zero for a zero latent with zero biases.
enc, dec = WaveformEncoder().double(), WaveformDecoder().double()
for p in (enc.conv.bias, dec.deconv.bias):
    torch.nn.init.zeros_(p)
print("ICL at m = 0:", float(icl(torch.zeros(1, 64, 100, **f64), enc, dec)))
print(f"ICL for a random latent: {float(icl(torch.rand(1, 64, 100, **f64), enc, dec)):.4f}")

# The discriminator scores three resolutions of the waveform.
msd = MultiScaleDiscriminator().double()
init_weights(msd)
print("scores per scale:", msd(torch.randn(2, 24000, **f64)).shape)
const = lambda v: (lambda w: torch.full((w.shape[0], 3), v, **f64))
print("disc loss with D = 0.5 everywhere:", float(disc_loss(const(0.5), x[None], est[None])))
print("generator adversarial loss when D is fooled:", float(gen_adv_loss(const(1.0), est[None])))

# All terms enter the generator loss with unit weight by default.
loss = total_generator_loss(dict(wrql=2.0, secl=0.5, icl=0.1, adv_g=0.4))
print("total", float(loss.total), "breakdown", loss.parts)
