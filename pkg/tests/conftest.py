import numpy as np
import pytest

from msrnn import Model, ModelConfig, TokenStream, init_random_model


def make_config(n_layers=2, n_heads=2, head_dim=8, ff_dim=32, vocab_size=64,
                train_context_len=32, rope_base=10000.0):
    return ModelConfig(n_layers=n_layers, n_heads=n_heads, head_dim=head_dim,
                       hidden_dim=n_heads * head_dim, ff_dim=ff_dim,
                       vocab_size=vocab_size,
                       train_context_len=train_context_len,
                       rope_base=rope_base)


def make_model(seed=0, **kwargs):
    config = make_config(**kwargs)
    return Model(config, init_random_model(config, seed))


def make_stream(model, length, chunk_len, seed=0):
    rng = np.random.default_rng(seed)
    ids = tuple(int(x) for x in rng.integers(0, model.config.vocab_size, length))
    return TokenStream(ids=ids, chunk_len=chunk_len)


@pytest.fixture
def tiny_model():
    return make_model(seed=7)


@pytest.fixture
def toy_model():
    # the reference model size used by the end-to-end checks
    return make_model(seed=5, n_layers=4, n_heads=4, head_dim=16, ff_dim=128,
                      vocab_size=256, train_context_len=64)
