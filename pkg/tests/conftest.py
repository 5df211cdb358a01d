import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from consor.dataset import GenerationConfig, generate_dataset
from consor.embeddings import builtin_embedding_table
from consor.groupings import SchemaId, builtin_grouping_tables
from consor.model import EncoderConfig


@pytest.fixture(scope="session")
def table():
    return builtin_embedding_table()


@pytest.fixture(scope="session")
def grouping_tables():
    return builtin_grouping_tables()


@pytest.fixture(scope="session")
def tiny_splits():
    """Small four-schema dataset shared by fast tests."""
    config = GenerationConfig(
        seed=23,
        train_per_schema=16,
        val_per_schema=6,
        test_per_schema=6,
        unseen_total=8,
    )
    return generate_dataset(config)


@pytest.fixture(scope="session")
def tiny_encoder_config():
    """Encoder small enough for second-scale training in unit tests."""
    return EncoderConfig(
        model_dim=32,
        n_heads=2,
        feedforward_dim=64,
        n_layers=2,
        latent_dim=16,
        head_hidden_dim=32,
        dropout_rate=0.1,
        batch_size=16,
        max_epochs=4,
        rng_seed=3,
    )


@pytest.fixture(scope="session")
def ooe_splits():
    config = GenerationConfig(
        seed=5,
        train_per_schema=40,
        val_per_schema=10,
        test_per_schema=10,
        unseen_total=8,
        schemas=(SchemaId.OOE,),
    )
    return generate_dataset(config)
