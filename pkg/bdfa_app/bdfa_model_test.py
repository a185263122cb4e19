#!/usr/bin/env python
# -*- coding: utf-8 -*-

import json
import os

import pytest
import torch

import bdfa_model
import bdfa_tensor
from bdfa_errors import (
    BNStatsUnavailableError,
    ChecksumError,
    ConsistencyError,
    FormatError,
    NonFiniteError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from bdfa_model import LayerSpec, ModelGraph


def _CreateIdentityModel():
    head = LayerSpec("linear", {"in_features": 2, "out_features": 2}, {"weight": torch.eye(2), "bias": torch.zeros(2)})
    return ModelGraph([LayerSpec("flatten"), head], num_classes=2, input_shape=(2, 1, 1))


def _CreateBatchNormModel(channels=1, height=2, width=2):
    features = channels * height * width
    head = LayerSpec("linear", {}, {"weight": torch.eye(features)[:2].clone(), "bias": torch.zeros(2)})
    layers = [bdfa_model.batchnorm_layer(channels), LayerSpec("flatten"), head]
    return ModelGraph(layers, num_classes=2, input_shape=(channels, height, width))


def test_IdentityLinearForward():
    model = _CreateIdentityModel()
    logits = bdfa_model.forward(model, torch.tensor([0.3, 0.7]).reshape(1, 2, 1, 1), mode="eval")
    assert torch.allclose(logits, torch.tensor([[0.3, 0.7]]))


def test_EvalBatchNormWithUnitStatsIsIdentity():
    model = _CreateBatchNormModel(channels=2, height=1, width=1)
    x = torch.tensor([[1.5, -0.25]]).reshape(1, 2, 1, 1)
    logits = bdfa_model.forward(model, x, mode="eval")
    assert torch.allclose(logits, x.reshape(1, 2), atol=1e-5)


def test_EvalForwardIsDeterministic(trained_victim, small_dataset):
    x, _ = small_dataset.sample_batch(16, seed=0)
    first = bdfa_model.forward(trained_victim, x, mode="eval")
    second = bdfa_model.forward(trained_victim, x, mode="eval")
    assert torch.equal(first, second)


def test_ForwardRejectsWrongInputShape():
    with pytest.raises(ShapeError, match="forward"):
        bdfa_model.forward(_CreateIdentityModel(), torch.zeros(1, 3, 1, 1))


def test_NonFiniteActivationNamesLayer():
    model = _CreateIdentityModel()
    model.layers[1].params["bias"] = torch.tensor([float("nan"), 0.0])
    with pytest.raises(NonFiniteError, match="layer 1"):
        bdfa_model.forward(model, torch.ones(1, 2, 1, 1))


def test_CaptureBatchStatsHandArithmetic():
    model = _CreateBatchNormModel()
    x = torch.tensor([1.0, 1.0, 3.0, 3.0]).reshape(1, 1, 2, 2)
    [(mean, std)] = bdfa_model.capture_bn_batch_stats(model, x)
    assert mean.tolist() == [2.0]
    assert std.tolist() == [1.0]


def test_CaptureBatchStatsConstantInput():
    model = _CreateBatchNormModel()
    [(mean, std)] = bdfa_model.capture_bn_batch_stats(model, torch.full((3, 1, 2, 2), 1.25))
    assert mean.tolist() == [1.25]
    assert std.tolist() == [0.0]


def test_CaptureBatchStatsMatchesLoopOracle(float64):
    generator = bdfa_tensor.make_generator(5)
    x = torch.randn(3, 2, 4, 4, generator=generator)
    model = _CreateBatchNormModel(channels=2, height=4, width=4)
    [(mean, std)] = bdfa_model.capture_bn_batch_stats(model, x)
    for channel in range(2):
        values = [float(x[n, channel, i, j]) for n in range(3) for i in range(4) for j in range(4)]
        expected_mean = sum(values) / len(values)
        expected_var = sum((v - expected_mean) ** 2 for v in values) / len(values)
        assert float(mean[channel]) == pytest.approx(expected_mean, rel=1e-6, abs=1e-12)
        assert float(std[channel]) == pytest.approx(expected_var**0.5, rel=1e-6)


def test_CaptureBatchStatsOfConstructedBatch(float64):
    # Per-channel values +-s around m give mean m and population std s.
    target_mean, target_std = torch.tensor([0.5, -2.0]), torch.tensor([1.5, 0.25])
    signs = torch.tensor([1.0, -1.0, 1.0, -1.0]).reshape(1, 1, 2, 2).repeat(2, 2, 1, 1)
    x = target_mean.view(1, 2, 1, 1) + signs * target_std.view(1, 2, 1, 1)
    model = _CreateBatchNormModel(channels=2, height=2, width=2)
    [(mean, std)] = bdfa_model.capture_bn_batch_stats(model, x)
    assert torch.allclose(mean, target_mean, atol=1e-6)
    assert torch.allclose(std, target_std, atol=1e-6)


def test_CaptureBeforeForwardRejected():
    with pytest.raises(BNStatsUnavailableError):
        bdfa_model.capture_bn_batch_stats(_CreateBatchNormModel())


def test_CaptureLeavesRunningStatsUntouched():
    model = _CreateBatchNormModel()
    bdfa_model.capture_bn_batch_stats(model, torch.full((2, 1, 2, 2), 4.0))
    stats = model.layers[0].bn_stats
    assert stats.running_mean.tolist() == [0.0]
    assert stats.running_var.tolist() == [1.0]


def test_TrainForwardUpdatesRunningStatsWithMomentum():
    model = _CreateBatchNormModel()
    bdfa_model.forward(model, torch.tensor([1.0, 1.0, 3.0, 3.0]).reshape(1, 1, 2, 2), mode="train")
    stats = model.layers[0].bn_stats
    assert stats.running_mean.tolist() == pytest.approx([0.2])
    assert stats.running_var.tolist() == pytest.approx([1.0])


@pytest.mark.parametrize("arch", bdfa_model.ARCHITECTURES)
def test_BuildVictim(arch):
    model = bdfa_model.build_victim(arch, (3, 16, 16), 4, seed=1, width=4)
    kinds = [layer.kind for layer in model.layers]
    assert kinds.count("batchnorm2d") == 2
    assert ("residual_add" in kinds) == (arch == "residual")
    assert bdfa_model.forward(model, torch.zeros(2, 3, 16, 16), mode="eval").shape == (2, 4)


def test_BuildVictimIsSeeded():
    first = bdfa_model.build_victim("plain", (3, 16, 16), 4, seed=3)
    second = bdfa_model.build_victim("plain", (3, 16, 16), 4, seed=3)
    for a, b in zip(first.parameters(), second.parameters()):
        assert torch.equal(a, b)


def test_CloneIsIndependent(trained_victim):
    twin = trained_victim.clone()
    twin.layers[0].params["weight"].add_(1.0)
    assert not torch.equal(twin.layers[0].params["weight"], trained_victim.layers[0].params["weight"])


def test_HeadMustMatchClassCount():
    head = LayerSpec("linear", {}, {"weight": torch.zeros(4, 2), "bias": torch.zeros(4)})
    with pytest.raises(ConsistencyError, match="consistency error"):
        ModelGraph([LayerSpec("flatten"), head], num_classes=10, input_shape=(2, 1, 1))


def test_ResidualSkipMustPointBackwards():
    head = LayerSpec("linear", {}, {"weight": torch.zeros(2, 2), "bias": torch.zeros(2)})
    with pytest.raises(ConsistencyError, match="skips from"):
        ModelGraph([LayerSpec("residual_add", skip_from=3), LayerSpec("flatten"), head], 2, (2, 1, 1))


def test_SaveLoadRoundtrip(tmp_path, trained_victim):
    path = str(tmp_path / "model")
    bdfa_model.save_model(trained_victim, path)
    loaded = bdfa_model.load_model(path)
    assert loaded.arch == trained_victim.arch
    assert loaded.num_classes == trained_victim.num_classes
    assert loaded.input_shape == trained_victim.input_shape
    assert [layer.kind for layer in loaded.layers] == [layer.kind for layer in trained_victim.layers]
    for original, restored in zip(trained_victim.layers, loaded.layers):
        assert sorted(original.params) == sorted(restored.params)
        for name, value in original.params.items():
            assert value.numpy().tobytes() == restored.params[name].numpy().tobytes()
        if original.bn_stats is not None:
            assert torch.equal(original.bn_stats.running_mean, restored.bn_stats.running_mean)
            assert torch.equal(original.bn_stats.running_var, restored.bn_stats.running_var)
            assert original.bn_stats.momentum == restored.bn_stats.momentum


def test_SaveLoadRoundtripQuantized(tmp_path, quantized_victim):
    path = str(tmp_path / "quantized")
    bdfa_model.save_model(quantized_victim, path)
    loaded = bdfa_model.load_model(path)
    for (_, original), (_, restored) in zip(quantized_victim.quantized_layers(), loaded.quantized_layers()):
        assert restored.quant.codes.dtype == torch.int8
        assert torch.equal(original.quant.codes, restored.quant.codes)
        assert original.quant.delta == restored.quant.delta
        assert original.quant.q == restored.quant.q
        assert "weight" not in restored.params


def _SaveIdentity(tmp_path):
    path = str(tmp_path / "identity")
    bdfa_model.save_model(_CreateIdentityModel(), path)
    return path


def _EditManifest(path, **changes):
    manifest_path = os.path.join(path, bdfa_model.MANIFEST_FILE)
    with open(manifest_path) as manifest_file:
        manifest = json.load(manifest_file)
    manifest.update(changes)
    with open(manifest_path, "w") as manifest_file:
        json.dump(manifest, manifest_file)


def test_LoadRejectsCorruptedMagic(tmp_path):
    path = _SaveIdentity(tmp_path)
    blob_path = os.path.join(path, bdfa_model.BLOB_FILE)
    with open(blob_path, "r+b") as blob_file:
        blob_file.write(b"XXXX")
    with pytest.raises(FormatError, match="format error"):
        bdfa_model.load_model(path)


def test_LoadRejectsClassCountMismatch(tmp_path):
    path = _SaveIdentity(tmp_path)
    _EditManifest(path, num_classes=10)
    with pytest.raises(ConsistencyError, match="consistency error"):
        bdfa_model.load_model(path)


def test_LoadRejectsVersionMismatch(tmp_path):
    path = _SaveIdentity(tmp_path)
    _EditManifest(path, format_version=bdfa_model.FORMAT_VERSION + 1)
    with pytest.raises(VersionError, match="version mismatch"):
        bdfa_model.load_model(path)


def test_LoadRejectsTruncatedBlob(tmp_path):
    path = _SaveIdentity(tmp_path)
    blob_path = os.path.join(path, bdfa_model.BLOB_FILE)
    with open(blob_path, "rb") as blob_file:
        data = blob_file.read()
    with open(blob_path, "wb") as blob_file:
        blob_file.write(data[:-3])
    with pytest.raises(TruncatedError, match="truncated"):
        bdfa_model.load_model(path)


def test_LoadRejectsChecksumFailure(tmp_path):
    path = _SaveIdentity(tmp_path)
    blob_path = os.path.join(path, bdfa_model.BLOB_FILE)
    with open(blob_path, "r+b") as blob_file:
        blob_file.seek(len(bdfa_model.BLOB_MAGIC) + 2)
        byte = blob_file.read(1)
        blob_file.seek(len(bdfa_model.BLOB_MAGIC) + 2)
        blob_file.write(bytes([byte[0] ^ 0x01]))
    with pytest.raises(ChecksumError, match="checksum"):
        bdfa_model.load_model(path)


def test_LoadRejectsMissingManifest(tmp_path):
    with pytest.raises(FormatError):
        bdfa_model.load_model(str(tmp_path))


def _RewriteManifest(path, edit):
    manifest_path = os.path.join(path, bdfa_model.MANIFEST_FILE)
    with open(manifest_path) as manifest_file:
        manifest = json.load(manifest_file)
    edit(manifest)
    with open(manifest_path, "w") as manifest_file:
        json.dump(manifest, manifest_file)


@pytest.mark.parametrize("key", ["tensors", "layers"])
def test_LoadRejectsManifestWithoutKey(tmp_path, key):
    path = _SaveIdentity(tmp_path)
    _RewriteManifest(path, lambda manifest: manifest.pop(key))
    with pytest.raises(FormatError, match="lacks %s" % key):
        bdfa_model.load_model(path)


def test_LoadRejectsLayerEntryWithoutKind(tmp_path):
    path = _SaveIdentity(tmp_path)
    _RewriteManifest(path, lambda manifest: manifest["layers"][1].pop("kind"))
    with pytest.raises(FormatError, match="malformed layer entry"):
        bdfa_model.load_model(path)


def test_LoadRejectsBlobShorterThanHeader(tmp_path):
    path = _SaveIdentity(tmp_path)
    with open(os.path.join(path, bdfa_model.BLOB_FILE), "wb") as blob_file:
        blob_file.write(bdfa_model.BLOB_MAGIC[:3])
    with pytest.raises(TruncatedError, match="shorter than its header"):
        bdfa_model.load_model(path)
