"""Target speaker extraction: a dual-path transformer separator conditioned on a
jointly trained speaker encoder, with reconstruction, embedding-consistency,
inverse-consistency and multi-scale adversarial objectives."""

from .audio import Waveform, read_wav, write_wav
from .dataset import MixtureExample, build_example, log_mel, mix_pair, resample, synth_dataset
from .evaluation import EvalReport, evaluate, extract_file, improvement, sdr
from .model import TargetSpeakerExtractor
from .objectives import (
    LossWeights,
    MultiScaleDiscriminator,
    disc_loss,
    gen_adv_loss,
    icl,
    secl,
    si_snr,
    total_generator_loss,
    wrql,
)
from .separator import Separator, SeparatorConfig, chunk, overlap_add
from .speaker_encoder import SpeakerEncoder, cosine
from .trainer import TrainConfig, Trainer, ablation_configs, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
