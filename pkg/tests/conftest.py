import numpy as np
import pytest

from upband import data
from upband.model import DiscriminatorConfig, GeneratorConfig


def tiny_gen_cfg(**kw):
    base = dict(n_layers=2, d_model=64, n_heads=2, d_ff=128)
    base.update(kw)
    return GeneratorConfig(**base)


def tiny_disc_cfg(**kw):
    base = dict(group_counts=(1, 4, 16, 64), channels=64)
    base.update(kw)
    return DiscriminatorConfig(**base)


@pytest.fixture(scope="session")
def small_examples():
    rng = np.random.default_rng(2)
    return [data.make_pair(data.synth_signal(rng, 0.4), source=f"mem_{i}")
            for i in range(3)]


@pytest.fixture(scope="session")
def synth_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    data.synth_corpus(seed=0, n_files=8, duration_s=0.4, out_dir=root)
    return root
