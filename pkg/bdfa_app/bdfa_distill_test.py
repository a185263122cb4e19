#!/usr/bin/env python
# -*- coding: utf-8 -*-

import math
import os

import numpy as np
import pytest
import torch
from PIL import Image

import bdfa
import bdfa_data
import bdfa_distill
import bdfa_model
import bdfa_quant
from bdfa_config import DistillConfig, ExperimentConfig
from bdfa_errors import BNStatsUnavailableError, ChecksumError, ConfigError, ShapeError
from bdfa_model import LayerSpec, ModelGraph


def _CreateDistillConfig(iterations=20, batch_size=16, seed=0):
    config = DistillConfig()
    config.iterations = iterations
    config.batch_size = batch_size
    config.seed = seed
    return config


def _Snapshot(model):
    tensors = [value.detach().numpy().tobytes() for value in model.parameters()]
    for layer in model.bn_layers():
        tensors.append(layer.bn_stats.running_mean.numpy().tobytes())
        tensors.append(layer.bn_stats.running_var.numpy().tobytes())
    for _, layer in model.quantized_layers():
        tensors.append(layer.quant.codes.numpy().tobytes())
    return tensors


def test_InitBatchIsProjected(float64):
    x, labels = bdfa_distill.init_batch((8, 3, 16, 16), 4, seed=0)
    flat = x.reshape(8, -1)
    assert float(flat.mean(dim=1).abs().max()) < 1e-6
    assert torch.allclose(flat.var(dim=1, unbiased=False), torch.ones(8, dtype=torch.float64), atol=1e-6)
    assert labels.shape == (8,)
    assert set(labels.tolist()) <= {0, 1, 2, 3}


def test_InitBatchIsDeterministic():
    x1, labels1 = bdfa_distill.init_batch((4, 3, 8, 8), 10, seed=7)
    x2, labels2 = bdfa_distill.init_batch((4, 3, 8, 8), 10, seed=7)
    assert torch.equal(x1, x2)
    assert torch.equal(labels1, labels2)
    x3, _ = bdfa_distill.init_batch((4, 3, 8, 8), 10, seed=8)
    assert not torch.equal(x1, x3)


def test_InitBatchRejectsSingleClass():
    with pytest.raises(ValueError):
        bdfa_distill.init_batch((4, 3, 8, 8), 1, seed=0)


def test_InitBatchRejectsBadShape():
    with pytest.raises(ShapeError):
        bdfa_distill.init_batch((0, 3, 8, 8), 4, seed=0)


def test_ProjectIsIdempotent(float64):
    x = bdfa_distill.project(torch.randn(3, 2, 4, 4) * 5 + 2)
    assert torch.allclose(bdfa_distill.project(x), x, atol=1e-12)


def test_BnLossOfMatchingStatsIsZero():
    stats = [(torch.tensor([0.5, -1.0]), torch.tensor([1.0, 2.0]))]
    assert float(bdfa_distill.bn_loss(stats, stats)) == 0.0


def test_BnLossExample():
    batch = [(torch.tensor([3.0]), torch.tensor([1.0]))]
    running = [(torch.tensor([0.0]), torch.tensor([1.0]))]
    assert float(bdfa_distill.bn_loss(batch, running)) == pytest.approx(9.0)


def test_BnLossIsAdditiveOverLayers():
    first = ([(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 1.0]))], [(torch.zeros(2), torch.ones(2))])
    second = ([(torch.tensor([0.0]), torch.tensor([3.0]))], [(torch.zeros(1), torch.ones(1))])
    combined = bdfa_distill.bn_loss(first[0] + second[0], first[1] + second[1])
    separate = bdfa_distill.bn_loss(*first) + bdfa_distill.bn_loss(*second)
    assert float(combined) == pytest.approx(float(separate))
    assert float(combined) == pytest.approx(5.0 + 4.0)


def test_BnLossRejectsMisalignedLayers():
    stats = [(torch.zeros(2), torch.ones(2))]
    with pytest.raises(ShapeError):
        bdfa_distill.bn_loss(stats, stats + stats)
    with pytest.raises(ShapeError):
        bdfa_distill.bn_loss(stats, [(torch.zeros(3), torch.ones(3))])


def test_DnnLossOfUniformLogits():
    loss = bdfa_distill.dnn_loss(torch.zeros(5, 4), torch.tensor([0, 1, 2, 3, 0]))
    assert float(loss) == pytest.approx(math.log(4), abs=1e-6)


def test_DnnLossOfSaturatedLogits():
    logits = torch.tensor([[100.0, 0.0, 0.0, 0.0], [0.0, 0.0, 100.0, 0.0]])
    assert float(bdfa_distill.dnn_loss(logits, torch.tensor([0, 2]))) < 1e-6


def test_DistillLeavesModelUntouched(trained_victim):
    model = trained_victim.clone()
    before = _Snapshot(model)
    batch = bdfa_distill.distill(model, _CreateDistillConfig())
    assert _Snapshot(model) == before
    assert batch.x.shape == (16,) + model.input_shape
    assert len(batch.loss_history) == 20
    assert all(np.isfinite(row["total"]) for row in batch.loss_history)
    assert all(not value.requires_grad for value in model.parameters())


def test_DistillQuantizedModelLeavesCodesUntouched(quantized_victim):
    model = quantized_victim.clone()
    before = _Snapshot(model)
    bdfa_distill.distill(model, _CreateDistillConfig(iterations=5))
    assert _Snapshot(model) == before


def test_DistilledSamplesStayProjected(trained_victim):
    batch = bdfa_distill.distill(trained_victim.clone(), _CreateDistillConfig(iterations=10))
    flat = batch.x.reshape(len(batch), -1).to(torch.float64)
    assert float(flat.mean(dim=1).abs().max()) < 1e-4
    assert torch.allclose(flat.var(dim=1, unbiased=False), torch.ones(len(batch), dtype=torch.float64), atol=1e-4)


def test_DistillIsDeterministic(trained_victim):
    first = bdfa_distill.distill(trained_victim.clone(), _CreateDistillConfig(iterations=5, seed=3))
    second = bdfa_distill.distill(trained_victim.clone(), _CreateDistillConfig(iterations=5, seed=3))
    assert torch.equal(first.x, second.x)
    assert torch.equal(first.labels, second.labels)


def test_DistillWithoutBatchNorm():
    head = LayerSpec("linear", {}, {"weight": torch.zeros(4, 12), "bias": torch.zeros(4)})
    model = ModelGraph([LayerSpec("flatten"), head], 4, (3, 2, 2))
    with pytest.raises(BNStatsUnavailableError):
        bdfa_distill.distill(model, _CreateDistillConfig())


def test_DistillRejectsZeroWeights(trained_victim):
    config = _CreateDistillConfig()
    config.alpha, config.beta = 0.0, 0.0
    with pytest.raises(ConfigError):
        bdfa_distill.distill(trained_victim.clone(), config)


def test_SaveLoadDistilled(tmp_path, trained_victim):
    batch = bdfa_distill.distill(trained_victim.clone(), _CreateDistillConfig(iterations=3))
    folder = bdfa_distill.save_distilled(batch, str(tmp_path / "distilled"))
    restored = bdfa_distill.load_distilled(folder)
    assert restored.x.numpy().tobytes() == batch.x.numpy().tobytes()
    assert torch.equal(restored.labels, batch.labels)
    assert restored.num_classes == batch.num_classes
    assert restored.final_bn_loss == batch.final_bn_loss
    assert len(restored.loss_history) == 3
    assert restored.config["betas"] == [0.9, 0.999]


def test_LoadDistilledRejectsCorruption(tmp_path, trained_victim):
    batch = bdfa_distill.distill(trained_victim.clone(), _CreateDistillConfig(iterations=1))
    folder = bdfa_distill.save_distilled(batch, str(tmp_path / "distilled"))
    with open(os.path.join(folder, bdfa_distill.INPUTS_FILE), "r+b") as x_file:
        byte = x_file.read(1)
        x_file.seek(0)
        x_file.write(bytes([byte[0] ^ 0x80]))
    with pytest.raises(ChecksumError):
        bdfa_distill.load_distilled(folder)


def test_SavePreview(tmp_path, trained_victim):
    batch = bdfa_distill.distill(trained_victim.clone(), _CreateDistillConfig(iterations=1))
    path = bdfa_distill.save_preview(batch, str(tmp_path / "preview.png"))
    with Image.open(path) as preview:
        assert preview.mode == "RGB"
        assert preview.size == ((16 * 17 + 1) * 2, 18 * 2)


@pytest.fixture(scope="module")
def desk_scale_victim():
    """The quantized victim an experiment with default settings attacks for seed 0."""
    config = ExperimentConfig()
    dataset = bdfa_data.load_dataset(config.dataset, seed=0)
    model = bdfa_model.build_victim(
        config.model.arch,
        dataset.input_shape,
        dataset.num_classes,
        seed=0,
        width=config.model.width,
        bn_momentum=config.model.bn_momentum,
    )
    config.train.seed = 0
    model, _ = bdfa.train(model, dataset, config.train)
    return bdfa_quant.quantize_model(model, config.quantize.bits)


def _DistillRatios(model, beta, seeds=range(5)):
    ratios = []
    for seed in seeds:
        config = DistillConfig()
        config.seed = seed
        config.beta = beta
        batch = bdfa_distill.distill(model.clone(), config)
        ratios.append(batch.final_bn_loss / batch.initial_bn_loss)
    return ratios


@pytest.mark.slow
def test_DistillationReducesBnLoss(desk_scale_victim):
    assert np.mean(_DistillRatios(desk_scale_victim, beta=1.0)) <= 0.1


@pytest.mark.slow
def test_PureBnObjectiveDoesNotIncreaseBnLoss(desk_scale_victim):
    assert np.mean(_DistillRatios(desk_scale_victim, beta=0.0)) <= 1.0


def _CreateMatchedBnModel(channels=3, size=4, num_classes=4):
    # Identity 1x1 conv into BN(mean 0, var 1): standard-normal inputs already match the running statistics.
    conv = bdfa_model.conv_layer(channels, channels, kernel=1, pad=0)
    conv.params["weight"] = torch.eye(channels).reshape(channels, channels, 1, 1)
    weight = torch.zeros(num_classes, channels * size * size)
    head = LayerSpec("linear", {}, {"weight": weight, "bias": torch.zeros(num_classes)})
    layers = [conv, bdfa_model.batchnorm_layer(channels), LayerSpec("flatten"), head]
    return ModelGraph(layers, num_classes, (channels, size, size))


@pytest.mark.parametrize("seed", range(5))
def test_MatchedStatisticsStayNearFloor(seed):
    config = DistillConfig()
    config.seed = seed
    batch = bdfa_distill.distill(_CreateMatchedBnModel(), config)
    assert batch.initial_bn_loss < 0.05
    assert batch.final_bn_loss <= 1.05 * batch.initial_bn_loss


def test_DistillWithDeadFilter():
    model = bdfa_model.build_victim("plain", (3, 8, 8), 4, seed=0, width=4)
    with torch.no_grad():
        model.layers[0].params["weight"][1].zero_()
    batch = bdfa_distill.distill(model, _CreateDistillConfig(iterations=5, batch_size=8))
    assert bool(torch.isfinite(batch.x).all())
    assert all(math.isfinite(entry["total"]) for entry in batch.loss_history)
    first_bn_std = model.last_bn_batch_stats[0][1]
    assert float(first_bn_std[1]) == 0.0


def test_InitBatchLabelsAreNearUniform():
    # Pooled over 50 seeds, 3 degrees of freedom; 16.27 is the 0.999 quantile.
    counts = torch.zeros(4, dtype=torch.int64)
    for seed in range(50):
        _, labels = bdfa_distill.init_batch((128, 1, 2, 2), 4, seed=seed)
        counts += torch.bincount(labels, minlength=4)
    expected = counts.sum().item() / 4
    chi_square = float(((counts.double() - expected) ** 2 / expected).sum())
    assert chi_square < 16.27


def test_RunningStatsAreDistillTargets(trained_victim):
    model = trained_victim.clone()
    targets = bdfa_model.running_bn_stats(model)
    assert len(targets) == len(model.bn_layers())
    for (mean, std), layer in zip(targets, model.bn_layers()):
        assert torch.allclose(std**2, layer.bn_stats.running_var, rtol=1e-5)
        assert torch.equal(mean, layer.bn_stats.running_mean)
