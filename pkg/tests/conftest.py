import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

import numpy as np
import pytest
import structlog

from src.models import FixtureDatasetSpec
from src.services.fixtures import (
    FIXTURE_EPOCHS,
    build_fixture_model,
    generate_fixture_dataset,
    held_out_spec,
    train_fixture_model,
)

structlog.configure(processors=[structlog.processors.JSONRenderer()])

TRAIN_SIZE = 800
HELD_OUT_SIZE = 200


@pytest.fixture(scope="session")
def fixture_spec():
    return FixtureDatasetSpec(seed=0)


@pytest.fixture
def untrained_adapter():
    """Fresh per test, since tests read query-counter deltas and mutate weights"""
    return build_fixture_model(seed=0)


@pytest.fixture(scope="session")
def small_dataset(fixture_spec):
    return generate_fixture_dataset(fixture_spec, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_fixture(fixture_spec):
    """(adapter, held-out samples) for the trained fixture classifier"""
    dataset = generate_fixture_dataset(fixture_spec, TRAIN_SIZE)
    held_out = generate_fixture_dataset(held_out_spec(fixture_spec, TRAIN_SIZE), HELD_OUT_SIZE)
    adapter = train_fixture_model(dataset, epochs=FIXTURE_EPOCHS, seed=0, held_out=held_out, spec=fixture_spec)
    return adapter, held_out
