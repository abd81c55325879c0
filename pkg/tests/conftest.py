import numpy as np
import pytest

from maskgrid import data as synth
from maskgrid import model


def micro_config(**kw):
    """Small config for fast structural tests."""
    base = dict(enc_layers=2, dec_layers=2, width=32, heads=2, vocab_text=64,
                vocab_image=64, seq_len_text=8, seq_len_target=16, dropout=0.0)
    base.update(kw)
    return model.ModelConfig(**base)


@pytest.fixture
def micro_bundle():
    return model.init_bundle(micro_config(), np.random.default_rng(0))


@pytest.fixture
def micro_records():
    return synth.generate_corpus(0, 32, height=4, width=4, vocab=64)
