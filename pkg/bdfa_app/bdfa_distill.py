#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Synthesizes an attack batch from a trained model alone.

Starting from projected Gaussian noise with random labels, X is optimized so
that the batch statistics entering every BN layer match the layer's running
statistics (alpha term) while the model classifies X as its random labels
(beta term). After every step each sample is projected back to mean 0 and
variance 1.
"""

import hashlib
import json
import logging
import os

import numpy as np
import pandas as pd
import torch
from PIL import Image
from tqdm import tqdm

import bdfa_model
import bdfa_tensor
from bdfa_config import DistillConfig
from bdfa_errors import (
    BNStatsUnavailableError,
    ChecksumError,
    ConfigError,
    DivergenceError,
    FormatError,
    NonFiniteError,
    ShapeError,
    TruncatedError,
    VersionError,
)

logger = logging.getLogger(__name__)

FORMAT_NAME = "bdfa-distilled"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
INPUTS_FILE = "x.bin"
LABELS_FILE = "labels.bin"
HISTORY_FILE = "loss_history.csv"
HISTORY_COLUMNS = ["iteration", "bn_loss", "dnn_loss", "total"]


class DistilledBatch:
    """
    Output of a distillation run.

    Attributes:
        x (Tensor): [N, C, H, W] synthetic inputs, each sample with mean 0 / variance 1.
        labels (Tensor): [N] random labels drawn once at initialization.
        num_classes (int): K of the model the batch was distilled from.
        seed (int): initialization seed.
        final_bn_loss, final_dnn_loss (float): losses of the returned X.
        loss_history (list): one dict per iteration with HISTORY_COLUMNS.
        config (dict): the DistillConfig fields used.
    """

    def __init__(self, x, labels, num_classes, seed, final_bn_loss, final_dnn_loss, loss_history=None, config=None):
        self.x = x
        self.labels = torch.as_tensor(labels, dtype=torch.int64)
        self.num_classes = int(num_classes)
        self.seed = seed
        self.final_bn_loss = float(final_bn_loss)
        self.final_dnn_loss = float(final_dnn_loss)
        self.loss_history = list(loss_history or [])
        self.config = dict(config or {})

    @property
    def initial_bn_loss(self):
        return self.loss_history[0]["bn_loss"] if self.loss_history else self.final_bn_loss

    def __len__(self):
        return self.x.shape[0]


def project(x):
    """Shifts and scales every sample to mean 0 and population variance 1."""
    flat = x.reshape(x.shape[0], -1)
    centered = flat - flat.mean(dim=1, keepdim=True)
    std = torch.sqrt((centered**2).mean(dim=1, keepdim=True))
    return (centered / torch.clamp(std, min=torch.finfo(x.dtype).tiny)).reshape(x.shape)


def init_batch(shape, num_classes: int, seed: int):
    """Projected standard-normal X and uniform labels in [0, num_classes)."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes, got %d" % num_classes)
    if len(shape) != 4 or any(int(d) < 1 for d in shape):
        raise ShapeError("init_batch: shape must be [N, C, H, W] with positive extents, got %s" % (list(shape),))
    generator = bdfa_tensor.make_generator(seed)
    x = torch.randn(tuple(shape), generator=generator)
    labels = torch.randint(0, num_classes, (shape[0],), generator=generator)
    return project(x), labels


def bn_loss(batch_stats, running_stats):
    """Sum over BN layers of squared distances between (mean, std) pairs."""
    if len(batch_stats) != len(running_stats):
        raise ShapeError("bn_loss: %d batch statistics for %d BN layers" % (len(batch_stats), len(running_stats)))
    total = 0.0
    for layer, ((mean, std), (target_mean, target_std)) in enumerate(zip(batch_stats, running_stats)):
        if mean.shape != target_mean.shape or std.shape != target_std.shape:
            raise ShapeError(
                "bn_loss: BN layer %d has %s channels, target has %s"
                % (layer, list(mean.shape), list(target_mean.shape))
            )
        total = total + torch.sum((target_mean - mean) ** 2) + torch.sum((target_std - std) ** 2)
    return total


def dnn_loss(logits, labels):
    """Mean cross-entropy of the batch against its fixed random labels."""
    return bdfa_tensor.forward_op("softmax_cross_entropy", logits, labels)


def distill(model, distill_config: DistillConfig = None, progress: bool = False) -> DistilledBatch:
    """
    Runs the distillation loop on model. Parameters and BN running statistics
    are left bit-identical; only X changes.

    Raises:
        ConfigError: distill_config.check_valid() reported problems.
        BNStatsUnavailableError: the model has no BN layer.
        DivergenceError: a non-finite loss appeared (carries the iteration).
    """
    distill_config = distill_config or DistillConfig()
    error_messages = distill_config.check_valid()
    if error_messages:
        raise ConfigError(error_messages)
    if not model.bn_layers():
        raise BNStatsUnavailableError("BN statistics unavailable: model has no batchnorm2d layer")

    targets = [(mean.detach().clone(), std.detach().clone()) for mean, std in bdfa_model.running_bn_stats(model)]
    shape = (distill_config.batch_size,) + tuple(model.input_shape)
    x, labels = init_batch(shape, model.num_classes, distill_config.seed)
    x.requires_grad_(True)
    optimizer = torch.optim.Adam([x], lr=distill_config.learning_rate, betas=tuple(distill_config.betas))

    grad_flags = [value.requires_grad for value in model.parameters()]
    model.requires_grad_(False)
    history = []
    try:
        for iteration in tqdm(range(distill_config.iterations), desc="distill", disable=not progress):
            optimizer.zero_grad()
            try:
                loss_bn, loss_dnn, total = _losses(model, x, labels, targets, distill_config)
                bdfa_tensor.backward(total)
            except NonFiniteError as e:
                raise DivergenceError("distillation diverged at iteration %d: %s" % (iteration, e), step=iteration)
            history.append(
                {"iteration": iteration, "bn_loss": loss_bn.item(), "dnn_loss": loss_dnn.item(), "total": total.item()}
            )
            optimizer.step()
            with torch.no_grad():
                x.copy_(project(x))
            if iteration % 100 == 0:
                entry = history[-1]
                logger.debug("iteration %d: bn %.5f dnn %.5f", iteration, entry["bn_loss"], entry["dnn_loss"])
        with torch.no_grad():
            final_bn, final_dnn, _ = _losses(model, x, labels, targets, distill_config)
    finally:
        for value, flag in zip(model.parameters(), grad_flags):
            value.requires_grad_(flag)

    logger.info(
        "distilled %d samples in %d iterations: bn loss %.5f -> %.5f, dnn loss %.5f -> %.5f",
        shape[0],
        distill_config.iterations,
        history[0]["bn_loss"],
        final_bn.item(),
        history[0]["dnn_loss"],
        final_dnn.item(),
    )
    return DistilledBatch(
        x.detach().clone(),
        labels,
        model.num_classes,
        distill_config.seed,
        final_bn.item(),
        final_dnn.item(),
        history,
        config=distill_config.fields(),
    )


def _losses(model, x, labels, targets, distill_config):
    # Batch-statistics forward; running statistics are the targets and stay put.
    logits = bdfa_model.forward(model, x, mode="train", update_running_stats=False)
    loss_bn = bn_loss(model.last_bn_batch_stats, targets)
    loss_dnn = dnn_loss(logits, labels)
    total = distill_config.alpha * loss_bn + distill_config.beta * loss_dnn
    if not bool(torch.isfinite(total.detach())):
        raise NonFiniteError("total loss is %s" % total.item())
    return loss_bn, loss_dnn, total


def _write_array(path, array):
    data = array.tobytes()
    with open(path, "wb") as out_file:
        out_file.write(data)
    return {
        "file": os.path.basename(path),
        "dtype": array.dtype.str,
        "shape": list(array.shape),
        "sha256": hashlib.sha256(data).hexdigest(),
    }


def _read_array(folder, entry):
    path = os.path.join(folder, entry["file"])
    if not os.path.isfile(path):
        raise TruncatedError("truncated file: %s is missing" % path)
    with open(path, "rb") as in_file:
        data = in_file.read()
    dtype = np.dtype(entry["dtype"])
    expected = int(np.prod(entry["shape"])) * dtype.itemsize
    if len(data) != expected:
        raise TruncatedError("truncated file: %s has %d bytes, expected %d" % (path, len(data), expected))
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise ChecksumError("checksum failure: %s" % path)
    return np.frombuffer(data, dtype=dtype).reshape(entry["shape"]).copy()


def save_distilled(batch: DistilledBatch, folder: str):
    """Manifest, little-endian float32 X, int32 labels and loss_history.csv."""
    os.makedirs(folder, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "num_samples": len(batch),
        "shape": list(batch.x.shape),
        "num_classes": batch.num_classes,
        "seed": batch.seed,
        "config": {key: list(value) if isinstance(value, tuple) else value for key, value in batch.config.items()},
        "final_bn_loss": batch.final_bn_loss,
        "final_dnn_loss": batch.final_dnn_loss,
        "x": _write_array(os.path.join(folder, INPUTS_FILE), batch.x.detach().numpy().astype("<f4")),
        "labels": _write_array(os.path.join(folder, LABELS_FILE), batch.labels.numpy().astype("<i4")),
    }
    with open(os.path.join(folder, MANIFEST_FILE), "w") as manifest_file:
        json.dump(manifest, manifest_file, indent=2, sort_keys=True)
    history = pd.DataFrame(batch.loss_history, columns=HISTORY_COLUMNS)
    history.to_csv(os.path.join(folder, HISTORY_FILE), index=False)
    logger.info("saved distilled batch (%d samples) to %s", len(batch), folder)
    return folder


def load_distilled(folder: str) -> DistilledBatch:
    manifest_path = os.path.join(folder, MANIFEST_FILE)
    try:
        with open(manifest_path) as manifest_file:
            manifest = json.load(manifest_file)
    except (OSError, ValueError) as e:
        raise FormatError("format error: cannot read %s (%s)" % (manifest_path, e))
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError("format error: %s is not a %s manifest" % (manifest_path, FORMAT_NAME))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            "version mismatch: %s has format_version %s" % (manifest_path, manifest.get("format_version"))
        )
    x = torch.as_tensor(_read_array(folder, manifest["x"]), dtype=bdfa_tensor.get_dtype())
    labels = torch.as_tensor(_read_array(folder, manifest["labels"]), dtype=torch.int64)
    history_path = os.path.join(folder, HISTORY_FILE)
    history = pd.read_csv(history_path).to_dict("records") if os.path.isfile(history_path) else []
    return DistilledBatch(
        x,
        labels,
        manifest["num_classes"],
        manifest["seed"],
        manifest["final_bn_loss"],
        manifest["final_dnn_loss"],
        history,
        config=manifest.get("config"),
    )


def save_preview(batch: DistilledBatch, path: str, columns: int = 16, scale: int = 2):
    """PNG grid of the synthetic inputs, each sample min-max scaled on its own."""
    x = batch.x.detach().to(torch.float64).numpy()
    count, channels, height, width = x.shape
    rows = (count + columns - 1) // columns
    low = x.reshape(count, -1).min(axis=1)[:, None, None, None]
    high = x.reshape(count, -1).max(axis=1)[:, None, None, None]
    pixels = np.round(255.0 * (x - low) / np.maximum(high - low, 1e-12)).astype(np.uint8)
    mode = "L" if channels == 1 else "RGB"
    grid = Image.new(mode, (columns * (width + 1) + 1, rows * (height + 1) + 1))
    for i in range(count):
        tile = pixels[i, 0] if channels == 1 else pixels[i, :3].transpose(1, 2, 0)
        position = (1 + (i % columns) * (width + 1), 1 + (i // columns) * (height + 1))
        grid.paste(Image.fromarray(np.ascontiguousarray(tile)), position)
    grid = grid.resize((grid.width * scale, grid.height * scale), Image.NEAREST)
    grid.save(path, format="png", optimize=True)
    return path
