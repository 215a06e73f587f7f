import numpy as np
import pytest

from chunkkv import ChunkSpec, ModelConfig, init_weights


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(
        n_layers=2,
        n_heads=2,
        d_model=16,
        d_head=8,
        d_ff=32,
        vocab_size=64,
        max_position=4096,
    )


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return init_weights(tiny_config, seed=7)


@pytest.fixture(scope="session")
def toy_config_fixture():
    from chunkkv import toy_config

    return toy_config()


@pytest.fixture(scope="session")
def toy_weights(toy_config_fixture):
    return init_weights(toy_config_fixture, seed=7)


def make_chunks(token_ids, lengths):
    """Split a token array into ChunkSpecs of the given lengths."""
    chunks = []
    start = 0
    for i, n in enumerate(lengths):
        chunks.append(ChunkSpec(chunk_id=f"c{i}", token_ids=token_ids[start : start + n], declared_order_index=i))
        start += n
    assert start == len(token_ids)
    return chunks
