"""Shared fixtures: one trained toy denoiser reused across the whole session."""

import pytest

from polyclip.diffusion import (
    cosine_schedule,
    make_synthetic_dataset,
    save_toy_denoiser,
    train_toy_denoiser,
)

TRAIN_SAMPLES = 256
TRAIN_EPOCHS = 30
TRAIN_SEED = 5
DATASET_SEED = 11


@pytest.fixture(scope="session")
def schedule():
    return cosine_schedule(50)


@pytest.fixture(scope="session")
def toy_model(schedule):
    dataset = make_synthetic_dataset(TRAIN_SAMPLES, seed=DATASET_SEED)
    return train_toy_denoiser(dataset, epochs=TRAIN_EPOCHS, seed=TRAIN_SEED, schedule=schedule)


@pytest.fixture(scope="session")
def toy_weights(toy_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "toy_denoiser.pt"
    save_toy_denoiser(toy_model, path)
    return path
