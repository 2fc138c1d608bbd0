import numpy as np
import pytest

from cmm.model import CmmModel, ModelConfig
from cmm.synthgen import SynthSpec, generate, write_corpus
from cmm.training import RunConfig, train


TINY_CFG = dict(
    d_model=8,
    n_heads=2,
    d_ffn=16,
    n_layers_src=1,
    n_layers_mem=1,
    n_layers_dec=1,
    vocab_size=16,
    max_len=32,
)


@pytest.fixture
def tiny_model():
    return CmmModel(ModelConfig(**TINY_CFG), seed=0)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    """A written-out synthetic corpus shared across CLI/training tests."""
    out = tmp_path_factory.mktemp("corpus")
    spec = SynthSpec(
        n_templates=3,
        slots_per_template=2,
        slot_lexicon_size=6,
        cluster_size=3,
        n_train=48,
        n_dev=8,
        n_test=8,
        seed=1,
    )
    write_corpus(generate(spec), out)
    return out


@pytest.fixture(scope="session")
def micro_run(small_corpus_dir, tmp_path_factory):
    """A briefly trained model for decoding tests; shared to amortize cost."""
    out = tmp_path_factory.mktemp("micro_run")
    run = RunConfig.from_dict(
        {
            "model": {
                "d_model": 32,
                "n_heads": 2,
                "d_ffn": 64,
                "n_layers_src": 1,
                "n_layers_mem": 1,
                "n_layers_dec": 1,
                "max_len": 64,
            },
            "retrieval": {"strategy": "contrastive", "alpha": 0.7, "m_size": 3, "k": 16},
            "optim": {"warmup_steps": 40, "max_steps": 120},
            "trainer": {"log_interval": 20},
            "batch_max_tokens": 800,
            "seed": 3,
            "paths": {"corpus_dir": str(small_corpus_dir), "out_dir": str(out)},
        }
    )
    result = train(run)
    result.model.set_train(False)
    return run, result


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
