"""Joint training of speaker encoder + separator against the multi-scale discriminator.

One training step = generator update (Adam) followed by one discriminator
update (AdamW) on the detached estimate from the same forward pass.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .dataset import MixtureExample, read_manifest
from .model import TargetSpeakerExtractor, init_weights
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
from .separator import BACKBONES, NonFiniteError, SeparatorConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSXCKPT\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sI32s")

TOY_MSD_CHANNELS = (16, 32, 64, 64)
FULL_MSD_CHANNELS = (16, 64, 256, 512)


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-7
    epochs: int = 201
    icl_on: bool = True
    secl_on: bool = True
    adv_on: bool = True
    joint_training: bool = True
    backbone: str = "dual_path"
    toy: bool = False
    seed: int = 0
    grad_clip: float | None = 5.0
    max_steps: int | None = None
    val_every: int = 1
    dtype: str = "float32"
    weights: LossWeights = field(default_factory=LossWeights)
    separator: dict = field(default_factory=dict)  # SeparatorConfig overrides

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("batch_size", "epochs", "val_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def separator_config(self) -> SeparatorConfig:
        opts = dict(self.separator, backbone=self.backbone)
        return SeparatorConfig.toy(**opts) if self.toy else SeparatorConfig(**opts)

    @property
    def encoder_hidden(self) -> int:
        return 64 if self.toy else 256

    @property
    def msd_channels(self):
        return TOY_MSD_CHANNELS if self.toy else FULL_MSD_CHANNELS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path, **overrides) -> TrainConfig:
    """Read a YAML (or JSON) mapping of ``TrainConfig`` fields; ``None`` overrides are ignored."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def ablation_configs(base: TrainConfig | None = None) -> dict[str, TrainConfig]:
    """The ablation ladder, from the frozen-encoder CNN baseline to the full system."""
    base = base or TrainConfig()
    off = dict(icl_on=False, secl_on=False, adv_on=False, joint_training=False)
    return {
        "baseline": replace(base, backbone="conv_tasnet", **off),
        "baseline+icl": replace(base, backbone="conv_tasnet", **dict(off, icl_on=True)),
        "baseline+icl+secl": replace(base, backbone="conv_tasnet", **dict(off, icl_on=True, secl_on=True)),
        "baseline+icl+secl+joint": replace(base, backbone="conv_tasnet", icl_on=True, secl_on=True, joint_training=True,
                                           adv_on=False),
        "dual_path+icl+secl+joint": replace(base, backbone="dual_path", icl_on=True, secl_on=True, joint_training=True,
                                            adv_on=False),
        "dual_path+icl+secl+joint+msd": replace(base, backbone="dual_path", icl_on=True, secl_on=True,
                                                joint_training=True, adv_on=True),
    }


SEPARATOR_GROUPS = ("waveform_encoder", "blender", "core", "waveform_decoder")


def update_paths(config: TrainConfig) -> dict[str, frozenset[str]]:
    """Loss components whose gradients update each parameter group under ``config``."""
    gen = {"wrql"}
    gen |= {"icl"} if config.icl_on else set()
    gen |= {"secl"} if config.secl_on else set()
    gen |= {"adv_g"} if config.adv_on else set()
    paths = {name: frozenset(gen) for name in SEPARATOR_GROUPS}
    paths["speaker_encoder"] = frozenset(gen) if config.joint_training else frozenset()
    paths["discriminator"] = frozenset({"adv_d"}) if config.adv_on else frozenset()
    return paths


@dataclass
class Batch:
    mixture: torch.Tensor  # B x t @ 8 kHz
    target: torch.Tensor  # B x t @ 8 kHz
    reference: torch.Tensor  # B x r @ 16 kHz

    @classmethod
    def collate(cls, examples: list[MixtureExample], dtype=torch.float32) -> "Batch":
        def stack(attr):
            return torch.from_numpy(np.stack([getattr(ex, attr).samples for ex in examples])).to(dtype)
        return cls(stack("mixture"), stack("target"), stack("reference"))

    def __len__(self):
        return self.mixture.shape[0]


def batch_order(seed: int, epoch: int, n: int, batch_size: int) -> list[np.ndarray]:
    """Batch composition as a pure function of (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def select_best(val_history: list[float]) -> int:
    """1-based epoch index of the highest validation score (earliest wins ties)."""
    if not val_history:
        raise ValueError("empty validation history")
    return int(np.argmax(val_history)) + 1


class Trainer:
    """Holds models, optimizers and counters; owns every parameter update."""

    def __init__(self, config: TrainConfig):
        self.config = config
        torch.manual_seed(config.seed)
        dtype = config.torch_dtype
        self.model = TargetSpeakerExtractor(config.separator_config(), config.encoder_hidden).to(dtype)
        self.discriminator = MultiScaleDiscriminator(config.msd_channels).to(dtype)
        init_weights(self.model)
        init_weights(self.discriminator)

        self.model.speaker_encoder.requires_grad_(config.joint_training)
        gen_params = [p for p in self.model.parameters() if p.requires_grad]
        self.gen_opt = torch.optim.Adam(gen_params, lr=config.lr, weight_decay=config.weight_decay)
        self.disc_opt = torch.optim.AdamW(self.discriminator.parameters(), lr=config.lr,
                                          weight_decay=config.weight_decay)
        self.step = 0
        self.epoch = 0
        self.best_metric = -math.inf
        self.best_epoch = None
        self.val_history: list[float] = []
        self.dump_dir: Path | None = None

    # ------------------------------------------------------------------

    def generator_loss(self, batch: Batch):
        cfg = self.config
        est, m, e = self.model(batch.mixture, batch.reference)
        parts = {"wrql": wrql(batch.target, est)}
        if cfg.icl_on:
            parts["icl"] = icl(m, self.model.separator.encoder, self.model.separator.decoder)
        if cfg.secl_on:
            parts["secl"] = secl(batch.reference, est, self.model.speaker_encoder, ref_embedding=e)
        if cfg.adv_on:
            self.discriminator.requires_grad_(False)
            try:
                parts["adv_g"] = gen_adv_loss(self.discriminator, est)
            finally:
                self.discriminator.requires_grad_(True)
        return total_generator_loss(parts, cfg.weights), est

    def _clip(self, params):
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip)

    def train_step(self, batch: Batch) -> dict:
        self.model.train()
        self.discriminator.train()
        try:
            loss, est = self.generator_loss(batch)
        except (FloatingPointError, NonFiniteError):
            self._dump()
            raise
        self.gen_opt.zero_grad(set_to_none=True)
        loss.total.backward()
        self._clip([p for g in self.gen_opt.param_groups for p in g["params"]])
        self.gen_opt.step()

        metrics = {"step": self.step, "epoch": self.epoch, **{k: None for k in ("wrql", "secl", "icl", "adv_g")}}
        metrics.update(loss.parts)
        metrics["total"] = float(loss.total.detach())
        metrics["adv_d"] = None
        if self.config.adv_on:
            d = disc_loss(self.discriminator, batch.target, est)
            if not torch.isfinite(d):
                self._dump()
                raise FloatingPointError(f"discriminator loss is not finite ({float(d)})")
            self.disc_opt.zero_grad(set_to_none=True)
            d.backward()
            self._clip(self.discriminator.parameters())
            self.disc_opt.step()
            metrics["adv_d"] = float(d.detach())
        self.step += 1
        return metrics

    def _dump(self):
        if self.dump_dir is not None:
            path = Path(self.dump_dir) / "nonfinite_dump.ckpt"
            save_checkpoint(self, path)
            log.error("non-finite loss at step %d; state dumped to %s", self.step, path)

    # ------------------------------------------------------------------

    @torch.no_grad()
    def extract(self, mixture: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        """Inference-mode estimate for ``(B, t)`` mixtures and ``(B, r)`` references."""
        self.model.eval()
        dtype = self.config.torch_dtype
        est, _, _ = self.model(mixture.to(dtype), reference.to(dtype))
        return est

    @torch.no_grad()
    def validate(self, examples: list[MixtureExample]) -> float:
        """Mean SI-SNR improvement over ``examples``, one example at a time."""
        scores = []
        for ex in examples:
            b = Batch.collate([ex], torch.float64)
            est = self.extract(b.mixture, b.reference).to(torch.float64)
            scores.append(float(si_snr(b.target, est) - si_snr(b.target, b.mixture)))
        return float(np.mean(scores))

    # ------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "schema_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "model": self.model.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "gen_opt": self.gen_opt.state_dict(),
            "disc_opt": self.disc_opt.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "step": self.step,
            "epoch": self.epoch,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "val_history": list(self.val_history),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.discriminator.load_state_dict(state["discriminator"])
        self.gen_opt.load_state_dict(state["gen_opt"])
        self.disc_opt.load_state_dict(state["disc_opt"])
        torch.set_rng_state(state["torch_rng"])
        self.step = state["step"]
        self.epoch = state["epoch"]
        self.best_metric = state["best_metric"]
        self.best_epoch = state["best_epoch"]
        self.val_history = list(state["val_history"])


# --------------------------------------------------------------------------
# checkpoints: 8-byte magic, uint32 schema version, sha256 of payload, torch payload


def save_checkpoint(trainer: Trainer, path) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    torch.save(trainer.state_dict(), buf)
    payload = buf.getvalue()
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, hashlib.sha256(payload).digest())
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Trainer:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, digest = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: schema version {version}, expected {CHECKPOINT_VERSION}")
    payload = raw[_HEADER.size:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        state = torch.load(io.BytesIO(payload), weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot decode payload: {exc}") from exc
    if state.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: payload schema version mismatch")
    trainer = Trainer(TrainConfig.from_dict(state["config"]))
    trainer.load_state_dict(state)
    return trainer


# --------------------------------------------------------------------------


def _load_examples(manifest) -> list[MixtureExample]:
    records = read_manifest(manifest)
    if not records:
        raise ValueError(f"{manifest}: manifest is empty")
    return [r.load() for r in records]


def fit(config: TrainConfig, train_manifest, val_manifest, out_dir, resume=None) -> Path:
    """Train, validating every ``val_every`` epochs; returns the best checkpoint path.

    Writes ``metrics.jsonl`` (one record per step and per validation),
    ``last.ckpt`` after every epoch and ``best.ckpt`` whenever validation
    SI-SNRi improves.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = _load_examples(train_manifest)
    val = _load_examples(val_manifest)
    trainer = load_checkpoint(resume) if resume else Trainer(config)
    trainer.dump_dir = out_dir
    cfg = trainer.config
    best_path = out_dir / "best.ckpt"
    log_keys = ("step", "epoch", "wrql", "secl", "icl", "adv_g", "adv_d", "val_si_snri")

    with open(out_dir / "metrics.jsonl", "a") as log_file:
        def emit(record):
            log_file.write(json.dumps({k: record.get(k) for k in log_keys}) + "\n")
            log_file.flush()

        done = False
        while trainer.epoch < cfg.epochs and not done:
            for idx in batch_order(cfg.seed, trainer.epoch, len(train), cfg.batch_size):
                batch = Batch.collate([train[i] for i in idx], cfg.torch_dtype)
                emit(trainer.train_step(batch))
                if cfg.max_steps is not None and trainer.step >= cfg.max_steps:
                    done = True
                    break
            trainer.epoch += 1
            if trainer.epoch % cfg.val_every == 0 or done or trainer.epoch == cfg.epochs:
                score = trainer.validate(val)
                trainer.val_history.append(score)
                emit({"step": trainer.step, "epoch": trainer.epoch, "val_si_snri": score})
                log.info("epoch %d step %d: val SI-SNRi %.2f dB", trainer.epoch, trainer.step, score)
                if score > trainer.best_metric:
                    trainer.best_metric, trainer.best_epoch = score, trainer.epoch
                    save_checkpoint(trainer, best_path)
            save_checkpoint(trainer, out_dir / "last.ckpt")
    return best_path
