#!/usr/bin/env python
# -*- coding: utf-8 -*-

import pytest
import torch

import bdfa
import bdfa_data
import bdfa_model
import bdfa_quant
import bdfa_tensor
from bdfa_config import TrainConfig


@pytest.fixture(autouse=True)
def _default_precision():
    bdfa_tensor.set_precision("float32")
    yield
    bdfa_tensor.set_precision("float32")


@pytest.fixture
def float64():
    bdfa_tensor.set_precision("float64")
    yield torch.float64


def _CreateTrainConfig(epochs=3, seed=0):
    config = TrainConfig()
    config.epochs = epochs
    config.seed = seed
    return config


@pytest.fixture(scope="session")
def small_dataset():
    return bdfa_data.load_toy_dataset("blobs4", num_samples=240, seed=0)


@pytest.fixture(scope="session")
def trained_victim(small_dataset):
    """A residual victim trained for a few epochs on small_dataset; tests must clone before mutating."""
    torch.set_default_dtype(torch.float32)
    model = bdfa_model.build_victim("residual", small_dataset.input_shape, small_dataset.num_classes, seed=0, width=4)
    model, _ = bdfa.train(model, small_dataset, _CreateTrainConfig())
    return model


@pytest.fixture(scope="session")
def quantized_victim(trained_victim):
    return bdfa_quant.quantize_model(trained_victim, 8)


def pytest_addoption(parser):
    parser.addoption(
        "--regenerate-references",
        action="store_true",
        default=False,
        help="rewrite the reference report files under testdata/ from the current code",
    )


@pytest.fixture
def regenerate_references(request):
    return request.config.getoption("--regenerate-references")
