import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from trainer_utils import changed_groups, differing_gradients, named_groups, one_step, random_batch, tiny_config
from tsextract.dataset import read_manifest
from tsextract.objectives import disc_loss
from tsextract.trainer import (
    Batch,
    CheckpointError,
    TrainConfig,
    Trainer,
    ablation_configs,
    batch_order,
    fit,
    load_checkpoint,
    load_config,
    save_checkpoint,
    select_best,
    update_paths,
)

TOGGLES = ("icl_on", "secl_on", "adv_on", "joint_training")


# --------------------------------------------------------------------- config


def test_default_config_values():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.epochs) == (4, 1e-4, 1e-7, 201)
    assert cfg.icl_on and cfg.secl_on and cfg.adv_on and cfg.joint_training
    assert cfg.backbone == "dual_path"


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(epochs=0), dict(lr=0.0), dict(weight_decay=-1.0),
                                 dict(backbone="rnn"), dict(dtype="float16")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dict_round_trip():
    cfg = TrainConfig(toy=True, secl_on=False, seed=7, weights=dict(icl=0.5))
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"batchsize": 4})


def test_load_config_yaml_with_overrides(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("batch_size: 2\ntoy: true\nweights:\n  secl: 0.25\n")
    cfg = load_config(path, seed=9, toy=None)
    assert (cfg.batch_size, cfg.toy, cfg.seed, cfg.weights.secl) == (2, True, 9, 0.25)
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError, match="mapping"):
        load_config(path)


def test_toy_separator_config():
    sep = TrainConfig(toy=True).separator_config()
    assert (sep.chunk_size, sep.n_blocks, sep.n_filters) == (16, 2, 64)


# --------------------------------------------------------------------- ablation wiring


def test_ablation_rows_constructible():
    rows = ablation_configs(TrainConfig(toy=True))
    assert list(rows) == ["baseline", "baseline+icl", "baseline+icl+secl", "baseline+icl+secl+joint",
                          "dual_path+icl+secl+joint", "dual_path+icl+secl+joint+msd"]
    assert rows["baseline"].backbone == "conv_tasnet" and not rows["baseline"].joint_training
    assert rows["dual_path+icl+secl+joint+msd"].adv_on
    for cfg in rows.values():
        Trainer(replace(cfg, dtype="float64"))


def test_update_paths_table():
    full = update_paths(TrainConfig())
    assert full["core"] == {"wrql", "icl", "secl", "adv_g"}
    assert full["discriminator"] == {"adv_d"}
    frozen = update_paths(ablation_configs()["baseline"])
    assert frozen["speaker_encoder"] == frozenset() and frozen["discriminator"] == frozenset()
    assert frozen["waveform_decoder"] == {"wrql"}


@pytest.fixture(scope="module")
def wiring_batch():
    return random_batch(seed=3)


def _wiring_config(**kw):
    # global-norm clipping rescales every group's gradient together; disable it
    # so differences reflect gradient paths alone
    return tiny_config(grad_clip=None, **kw)


@pytest.mark.parametrize("toggle", TOGGLES)
def test_toggle_changes_exactly_documented_paths(toggle, wiring_batch):
    on = _wiring_config(**{toggle: True})
    off = _wiring_config(**{toggle: False})
    expected = {g for g, comps in update_paths(on).items() if comps != update_paths(off)[g]}
    run_on, run_off = one_step(on, wiring_batch), one_step(off, wiring_batch)
    assert differing_gradients(run_on[2], run_off[2]) == expected
    for cfg, (before, after, _) in ((on, run_on), (off, run_off)):
        assert changed_groups(before, after) == {g for g, comps in update_paths(cfg).items() if comps}


def test_adv_off_leaves_discriminator_unchanged(wiring_batch):
    before, after, _ = one_step(_wiring_config(adv_on=False), wiring_batch)
    assert "discriminator" not in changed_groups(before, after)


def test_frozen_encoder_unchanged(wiring_batch):
    before, after, _ = one_step(_wiring_config(joint_training=False), wiring_batch)
    assert "speaker_encoder" not in changed_groups(before, after)


def test_discriminator_update_independent_of_icl(wiring_batch):
    (_, with_icl, _), (_, without, _) = (one_step(_wiring_config(icl_on=flag), wiring_batch)
                                         for flag in (True, False))
    assert all(torch.equal(a, b) for a, b in zip(with_icl["discriminator"], without["discriminator"]))


def test_generator_then_discriminator_order(wiring_batch):
    """The discriminator step sees the estimate from the pre-update generator."""
    trainer = Trainer(tiny_config())
    ref = Trainer(tiny_config())
    est, _, _ = ref.model(wiring_batch.mixture, wiring_batch.reference)
    d = disc_loss(ref.discriminator, wiring_batch.target, est)
    metrics = trainer.train_step(wiring_batch)
    assert metrics["adv_d"] == float(d.detach())


# --------------------------------------------------------------------- step metrics


def test_breakdown_sums_to_total(wiring_batch):
    trainer = Trainer(tiny_config(weights=dict(secl=0.3, icl=2.0, adv_g=0.5)))
    w = trainer.config.weights
    for _ in range(3):
        m = trainer.train_step(wiring_batch)
        parts = m["wrql"] + w.secl * m["secl"] + w.icl * m["icl"] + w.adv_g * m["adv_g"]
        assert parts == pytest.approx(m["total"], abs=1e-6)


def test_disabled_components_logged_as_none(wiring_batch):
    m = Trainer(tiny_config(secl_on=False, adv_on=False)).train_step(wiring_batch)
    assert m["secl"] is None and m["adv_g"] is None and m["adv_d"] is None
    assert m["icl"] is not None


def test_discriminator_fits_frozen_generator():
    trainer = Trainer(tiny_config())
    batch = random_batch(seed=4)
    with torch.no_grad():
        est, _, _ = trainer.model(batch.mixture, batch.reference)
    losses = []
    for _ in range(200):
        d = disc_loss(trainer.discriminator, batch.target, est)
        trainer.disc_opt.zero_grad()
        d.backward()
        trainer.disc_opt.step()
        losses.append(float(d.detach()))
    assert losses[-1] < 0.5 * losses[0]


def test_non_finite_loss_dumps_checkpoint(tmp_path, wiring_batch):
    trainer = Trainer(tiny_config())
    trainer.dump_dir = tmp_path
    bad = Batch(wiring_batch.mixture.clone(), wiring_batch.target, wiring_batch.reference)
    bad.mixture[0, 10] = float("nan")
    with pytest.raises(FloatingPointError):
        trainer.train_step(bad)
    assert (tmp_path / "nonfinite_dump.ckpt").exists()


# --------------------------------------------------------------------- determinism


def _run(seed, steps, tmp_path, name):
    trainer = Trainer(tiny_config(seed=seed))
    log = [trainer.train_step(random_batch(seed=100 + i)) for i in range(steps)]
    path = save_checkpoint(trainer, tmp_path / f"{name}.ckpt")
    return log, path.read_bytes()


def test_ten_step_determinism(tmp_path):
    log_a, bytes_a = _run(5, 10, tmp_path, "a")
    log_b, bytes_b = _run(5, 10, tmp_path, "b")
    assert log_a == log_b
    assert bytes_a == bytes_b


def test_batch_order_pure_and_complete():
    a = batch_order(3, 7, 10, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, batch_order(3, 7, 10, 4)))
    assert sorted(np.concatenate(a)) == list(range(10))
    assert [len(b) for b in a] == [4, 4, 2]
    assert not all(np.array_equal(x, y) for x, y in zip(a, batch_order(3, 8, 10, 4)))


# --------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bitwise(tmp_path, wiring_batch):
    trainer = Trainer(tiny_config())
    trainer.train_step(wiring_batch)
    trainer.epoch, trainer.best_metric, trainer.best_epoch = 1, 2.5, 1
    est_before = trainer.extract(wiring_batch.mixture, wiring_batch.reference)
    path = save_checkpoint(trainer, tmp_path / "x.ckpt")
    loaded = load_checkpoint(path)
    assert torch.equal(loaded.extract(wiring_batch.mixture, wiring_batch.reference), est_before)
    assert (loaded.step, loaded.epoch, loaded.best_metric, loaded.best_epoch) == (1, 1, 2.5, 1)
    assert loaded.config == trainer.config
    for a, b in zip(named_groups(trainer)["discriminator"], named_groups(loaded)["discriminator"]):
        assert torch.equal(a, b)
    # optimizer state survives: the next step matches bitwise
    assert trainer.train_step(wiring_batch) == loaded.train_step(wiring_batch)


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic", "version", "empty"])
def test_corrupt_checkpoint_rejected(tmp_path, damage):
    path = save_checkpoint(Trainer(tiny_config()), tmp_path / "x.ckpt")
    raw = bytearray(path.read_bytes())
    if damage == "truncate":
        raw = raw[:len(raw) // 2]
    elif damage == "flip":
        raw[-100] ^= 0xFF
    elif damage == "magic":
        raw[:8] = b"NOTCKPT\x00"
    elif damage == "version":
        raw[8] = 99
    else:
        raw = raw[:10]
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# --------------------------------------------------------------------- fit


def test_select_best():
    assert select_best([3.0, 5.0, 4.0]) == 2
    assert select_best([1.0, 1.0]) == 1
    with pytest.raises(ValueError):
        select_best([])


def test_fit_smoke(small_dataset, tmp_path):
    cfg = tiny_config(epochs=1, batch_size=4)
    best = fit(cfg, small_dataset, small_dataset, tmp_path / "run")
    assert best.exists() and (tmp_path / "run" / "last.ckpt").exists()
    records = [json.loads(line) for line in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert set(records[0]) == {"step", "epoch", "wrql", "secl", "icl", "adv_g", "adv_d", "val_si_snri"}
    val = [r for r in records if r["val_si_snri"] is not None]
    assert len(val) == 1

    # validation metric equals a recomputation from the saved checkpoint
    trainer = load_checkpoint(best)
    examples = [r.load() for r in read_manifest(small_dataset)]
    assert trainer.validate(examples) == val[0]["val_si_snri"]
    assert trainer.epoch == 1 and trainer.best_epoch == 1


def test_fit_resume_epoch_monotonic(small_dataset, tmp_path):
    cfg = tiny_config(epochs=2, batch_size=4, max_steps=None)
    out = tmp_path / "run"
    fit(replace(cfg, epochs=1), small_dataset, small_dataset, out)
    first = load_checkpoint(out / "last.ckpt")
    first.config.epochs = 2
    save_checkpoint(first, out / "resume.ckpt")
    fit(cfg, small_dataset, small_dataset, out, resume=out / "resume.ckpt")
    final = load_checkpoint(out / "last.ckpt")
    assert (first.epoch, final.epoch) == (1, 2)
    epochs = [json.loads(line)["epoch"] for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert epochs == sorted(epochs)


def test_fit_empty_manifest(tmp_path, small_dataset):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty"):
        fit(tiny_config(), empty, small_dataset, tmp_path / "run")
