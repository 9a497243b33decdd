import numpy as np
import pytest
import torch

from tsextract import synthetic
from tsextract.dataset import synth_dataset


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synthetic.write_corpus(root, n_speakers=4, utts_per_speaker=2, seconds=5.5, seed=3)
    return root


@pytest.fixture(scope="session")
def small_dataset(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    synth_dataset(corpus_dir, out, n_examples=4, rng_seed=11)
    return out / "manifest.tsv"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)
