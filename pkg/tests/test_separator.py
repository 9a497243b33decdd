import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tsextract.audio import AudioError
from tsextract.model import TargetSpeakerExtractor, init_weights, parameter_groups
from tsextract.objectives import wrql, secl
from tsextract.separator import (
    ConditionBlender,
    DualPathCore,
    Separator,
    SeparatorConfig,
    WaveformDecoder,
    WaveformEncoder,
    apply_mask,
    chunk,
    latent_frames,
    overlap_add,
)


def _zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            torch.nn.init.zeros_(p)


@pytest.fixture
def toy_cfg():
    return SeparatorConfig.toy()


# --------------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [dict(kernel_size=8, stride=8), dict(n_heads=7), dict(chunk_size=15),
                                 dict(backbone="lstm")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SeparatorConfig(**bad)


def test_default_config_values():
    cfg = SeparatorConfig()
    assert (cfg.n_filters, cfg.kernel_size, cfg.stride, cfg.n_heads) == (64, 16, 8, 8)
    assert (cfg.n_blocks, cfg.chunk_size) == (6, 100)
    toy = SeparatorConfig.toy()
    assert (toy.n_blocks, toy.chunk_size, toy.n_filters) == (2, 16, 64)


# --------------------------------------------------------------------- encoder


@pytest.mark.parametrize("t,T", [(24000, 2999), (16, 1), (23, 1), (24, 2)])
def test_encoder_frames(t, T):
    enc = WaveformEncoder()
    X = enc(torch.randn(1, t))
    assert X.shape == (1, 64, T) and T == latent_frames(t)
    assert (X >= 0).all()


def test_encoder_zero_input():
    enc = WaveformEncoder()
    _zero_biases(enc)
    assert torch.equal(enc(torch.zeros(2, 200)), torch.zeros(2, 64, 24))


def test_encoder_too_short():
    with pytest.raises(AudioError):
        WaveformEncoder()(torch.zeros(1, 15))


# --------------------------------------------------------------------- blender


def test_blender_shape_and_zero():
    bl = ConditionBlender()
    for T in (1, 7, 300):
        assert bl(torch.randn(2, 64, T), torch.randn(2, 256)).shape == (2, 64, T)
    _zero_biases(bl)
    assert torch.equal(bl(torch.zeros(1, 64, 5), torch.zeros(1, 256)), torch.zeros(1, 64, 5))


def test_blender_depends_on_embedding():
    torch.manual_seed(3)
    bl = ConditionBlender()
    X = torch.rand(1, 64, 20)
    a = bl(X, torch.nn.functional.normalize(torch.randn(1, 256), dim=-1))
    b = bl(X, torch.nn.functional.normalize(torch.randn(1, 256), dim=-1))
    assert (a - b).abs().max() > 0


def test_blender_dimension_mismatch():
    bl = ConditionBlender()
    with pytest.raises(ValueError):
        bl(torch.randn(1, 32, 5), torch.randn(1, 256))
    with pytest.raises(ValueError):
        bl(torch.randn(1, 64, 5), torch.randn(1, 128))


# --------------------------------------------------------------------- chunking


def test_chunk_hand_example():
    # T=4, C=4, hop=2: pad 2 in front and 2 behind -> length 8 -> S = 3 chunks
    x = torch.arange(1.0, 5.0).view(1, 1, 4)
    c = chunk(x, 4)
    assert c.shape == (1, 1, 4, 3)
    expected = torch.tensor([[0, 0, 1, 2], [1, 2, 3, 4], [3, 4, 0, 0]], dtype=x.dtype).T
    assert torch.equal(c[0, 0], expected)


def test_chunk_zero_latent():
    assert torch.equal(chunk(torch.zeros(2, 3, 11), 4), torch.zeros(2, 3, 4, 7))


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 257), C=st.sampled_from([2, 4, 8, 16]), seed=st.integers(0, 1000))
def test_chunk_overlap_add_round_trip(T, C, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, T, generator=g, dtype=torch.float64)
    c = chunk(x, C)
    hop = C // 2
    assert c.shape[-1] == -(-T // hop) + 1
    torch.testing.assert_close(overlap_add(c, T), x, atol=1e-6, rtol=0)


# --------------------------------------------------------------------- core


def test_core_mask_shape_and_range(toy_cfg):
    torch.manual_seed(0)
    core = DualPathCore(toy_cfg)
    for T in (1, 37, 200):
        M = core(torch.randn(2, 64, T) * 3)
        assert M.shape == (2, 64, T)
        assert (M >= 0).all() and (M <= 1).all()


def test_mask_range_many_trials():
    torch.manual_seed(1)
    core = DualPathCore(SeparatorConfig.toy(n_blocks=1, chunk_size=8))
    for trial in range(1000):
        T = int(torch.randint(1, 40, ()))
        M = core(torch.randn(1, 64, T) * float(torch.rand(())) * 20)
        assert ((M >= 0) & (M <= 1)).all(), trial


def test_intra_block_equivariant_to_chunk_permutation(toy_cfg):
    torch.manual_seed(0)
    core = DualPathCore(toy_cfg)
    block = core.blocks[0]
    x = torch.randn(1, 64, 16, 9)
    perm = torch.randperm(9)
    torch.testing.assert_close(block.intra(x[..., perm]), block.intra(x)[..., perm])


def test_core_rejects_non_finite(toy_cfg):
    from tsextract.separator import NonFiniteError
    core = DualPathCore(toy_cfg)
    x = torch.randn(1, 64, 10)
    x[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="block 0"):
        core(x)


# --------------------------------------------------------------------- mask / decoder


def test_apply_mask():
    X = torch.rand(1, 64, 5)
    assert torch.equal(apply_mask(X, torch.ones_like(X)), X)
    assert torch.equal(apply_mask(X, torch.zeros_like(X)), torch.zeros_like(X))
    assert torch.equal(apply_mask(torch.tensor([[2.0]]), torch.tensor([[0.5]])), torch.tensor([[1.0]]))
    with pytest.raises(ValueError):
        apply_mask(X, torch.ones(1, 64, 4))


def test_decoder_length_and_linearity():
    dec = WaveformDecoder()
    m = torch.rand(1, 64, 2999, dtype=torch.float32)
    assert dec(m).shape == (1, 2998 * 8 + 16) == (1, 24000)
    _zero_biases(dec)
    assert torch.equal(dec(torch.zeros(1, 64, 3)), torch.zeros(1, 32))
    torch.testing.assert_close(dec(2.5 * m), 2.5 * dec(m))


# --------------------------------------------------------------------- full separator


@pytest.mark.parametrize("backbone", ["dual_path", "conv_tasnet"])
def test_shape_pipeline_3s(backbone):
    torch.manual_seed(0)
    sep = Separator(SeparatorConfig.toy(backbone=backbone))
    mix = torch.randn(1, 24000) * 0.1
    e = torch.nn.functional.normalize(torch.randn(1, 256), dim=-1)
    X = sep.encoder(mix)
    assert X.shape == (1, 64, 2999)
    M = sep.core(sep.blender(X, e))
    assert M.shape == (1, 64, 2999) and (M >= 0).all() and (M <= 1).all()
    est, m = sep(mix, e)
    assert est.shape == (1, 24000) and m.shape == (1, 64, 2999)


@pytest.mark.parametrize("t", [16, 100, 1001, 4003])
def test_output_length_matches_input(t):
    torch.manual_seed(0)
    sep = Separator(SeparatorConfig.toy(n_blocks=1))
    est, _ = sep(torch.randn(2, t), torch.randn(2, 256))
    assert est.shape == (2, t)


def test_extract_deterministic():
    torch.manual_seed(0)
    sep = Separator(SeparatorConfig.toy(n_blocks=1))
    mix, e = torch.randn(1, 800), torch.randn(1, 256)
    a, ma = sep(mix, e)
    b, mb = sep(mix, e)
    assert torch.equal(a, b) and torch.equal(ma, mb)


def _grad_groups(model):
    return {name: any(p.grad is not None and p.grad.abs().sum() > 0 for p in params)
            for name, params in parameter_groups(model).items()}


@pytest.mark.parametrize("backbone", ["dual_path", "conv_tasnet"])
def test_gradient_reachability(backbone):
    torch.manual_seed(0)
    model = TargetSpeakerExtractor(SeparatorConfig.toy(backbone=backbone, n_blocks=1), encoder_hidden=16)
    init_weights(model)
    mix, tgt, ref = torch.randn(2, 1600) * 0.1, torch.randn(2, 1600) * 0.1, torch.randn(2, 4000) * 0.1

    est, m, e = model(mix, ref)
    wrql(tgt, est).backward()
    reach = _grad_groups(model)
    assert all(reach[k] for k in ("waveform_encoder", "blender", "core", "waveform_decoder"))

    model.zero_grad(set_to_none=True)
    est, m, e = model(mix, ref)
    (wrql(tgt, est) + secl(ref, est, model.speaker_encoder, ref_embedding=e)).backward()
    assert all(_grad_groups(model).values())
