#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Datasets for victim training and evaluation.

blobs4: one Gaussian blob per 16x16x3 canvas, its quadrant is the class.
rings2: one ring per canvas drawn with Pillow, small (radius 3) or large (radius 6).
cifar10 / cifar100: the standard binary releases (data_batch_*.bin / train.bin).
"""

import logging
import os

import numpy as np
import torch
from PIL import Image, ImageDraw

import bdfa_tensor
from bdfa_errors import DatasetError

logger = logging.getLogger(__name__)

TOY_DATASETS = ["blobs4", "rings2"]
TOY_SHAPE = (3, 16, 16)
CIFAR_SHAPE = (3, 32, 32)

CIFAR10_TRAIN_FILES = ["data_batch_%d.bin" % i for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
CIFAR100_TRAIN_FILES = ["train.bin"]
CIFAR100_TEST_FILES = ["test.bin"]


class Dataset:
    """
    Normalized images with labels and a train/test tag per sample.

    Attributes:
        name (str): generator or release name.
        images (Tensor): [M, C, H, W], normalized with channel_mean/channel_std.
        labels (Tensor): [M] int64 in [0, num_classes).
        split_tags (ndarray): "train" or "test" per sample.
        num_classes (int): K.
        channel_mean, channel_std (ndarray): normalization statistics of the train split.
    """

    def __init__(self, name, images, labels, split_tags, num_classes, channel_mean, channel_std):
        self.name = name
        self.images = images
        self.labels = torch.as_tensor(labels, dtype=torch.int64)
        self.split_tags = np.asarray(split_tags)
        self.num_classes = int(num_classes)
        self.channel_mean = np.asarray(channel_mean, dtype=np.float64)
        self.channel_std = np.asarray(channel_std, dtype=np.float64)
        if bool((self.labels < 0).any()) or bool((self.labels >= self.num_classes).any()):
            raise DatasetError("%s: labels outside [0, %d)" % (name, self.num_classes))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def split(self, tag: str):
        selected = np.flatnonzero(self.split_tags == tag)
        index = torch.as_tensor(selected, dtype=torch.int64)
        return Dataset(
            "%s/%s" % (self.name, tag),
            self.images[index],
            self.labels[index],
            self.split_tags[selected],
            self.num_classes,
            self.channel_mean,
            self.channel_std,
        )

    def batches(self, batch_size: int, shuffle: bool = False, generator=None):
        if shuffle:
            order = torch.randperm(len(self), generator=generator)
        else:
            order = torch.arange(len(self))
        for start in range(0, len(self), batch_size):
            index = order[start : start + batch_size]
            yield self.images[index], self.labels[index]

    def sample_batch(self, batch_size: int, seed: int):
        generator = bdfa_tensor.make_generator(seed)
        index = torch.randperm(len(self), generator=generator)[: min(batch_size, len(self))]
        return self.images[index], self.labels[index]


def _normalize(raw, split_tags):
    """raw: [M, C, H, W] in data units. Normalizes with train-split channel statistics."""
    train = raw[split_tags == "train"]
    mean = train.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train.std(axis=(0, 2, 3), dtype=np.float64)
    std[std == 0] = 1.0
    shift = mean.astype(raw.dtype)[None, :, None, None]
    scale = std.astype(raw.dtype)[None, :, None, None]
    normalized = (raw - shift) / scale
    return torch.as_tensor(normalized, dtype=bdfa_tensor.get_dtype()), mean, std


def _split_tags(count, test_fraction, rng):
    tags = np.array(["train"] * count, dtype=object)
    test_count = int(round(count * test_fraction))
    tags[rng.permutation(count)[:test_count]] = "test"
    return tags.astype(str)


def _blobs4(count, rng):
    channels, height, width = TOY_SHAPE
    labels = rng.permutation(np.arange(count) % 4)
    centers = np.array([[4.0, 4.0], [4.0, 12.0], [12.0, 4.0], [12.0, 12.0]])
    rows, cols = np.mgrid[0:height, 0:width]
    images = rng.normal(0.0, 0.15, size=(count, channels, height, width))
    for i, label in enumerate(labels):
        cy, cx = centers[label] + rng.uniform(-1.5, 1.5, size=2)
        spread = rng.uniform(1.5, 2.5)
        blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * spread**2))
        color = rng.uniform(0.4, 1.0, size=channels)
        images[i] += color[:, None, None] * blob[None, :, :]
    return images, labels


def _rings2(count, rng):
    channels, height, width = TOY_SHAPE
    labels = rng.permutation(np.arange(count) % 2)
    radii = [3, 6]
    images = rng.normal(0.0, 0.15, size=(count, channels, height, width))
    for i, label in enumerate(labels):
        radius = radii[label]
        cy, cx = rng.integers(radius, height - radius), rng.integers(radius, width - radius)
        color = tuple(int(c) for c in rng.integers(100, 256, size=channels))
        canvas = Image.new("RGB", (width, height), (0, 0, 0))
        ImageDraw.Draw(canvas).ellipse([cx - radius, cy - radius, cx + radius, cy + radius], outline=color, width=1)
        images[i] += np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 255.0
    return images, labels


_GENERATORS = {"blobs4": (_blobs4, 4), "rings2": (_rings2, 2)}


def load_toy_dataset(name: str, num_samples: int = 1000, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Procedurally generated desk-scale dataset; identical bytes for identical (name, num_samples, seed)."""
    if name not in _GENERATORS:
        raise DatasetError("unknown dataset %r, expected one of %s" % (name, TOY_DATASETS))
    generate, num_classes = _GENERATORS[name]
    rng = np.random.default_rng(seed)
    raw, labels = generate(num_samples, rng)
    tags = _split_tags(num_samples, test_fraction, rng)
    images, mean, std = _normalize(raw, tags)
    logger.info("generated %s: %d samples, %d classes", name, num_samples, num_classes)
    return Dataset(name, images, labels, tags, num_classes, mean, std)


def _read_cifar_file(file_path, label_bytes, label_offset):
    if not os.path.isfile(file_path):
        raise DatasetError("missing CIFAR file %s" % file_path)
    record_size = label_bytes + int(np.prod(CIFAR_SHAPE))
    data = np.fromfile(file_path, dtype=np.uint8)
    if data.size == 0 or data.size % record_size != 0:
        raise DatasetError("truncated CIFAR file %s (%d bytes, record size %d)" % (file_path, data.size, record_size))
    records = data.reshape(-1, record_size)
    labels = records[:, label_offset].astype(np.int64)
    images = records[:, label_bytes:].reshape(-1, *CIFAR_SHAPE)
    return images, labels


def load_cifar(path: str) -> Dataset:
    """
    Parses the CIFAR binary release in path. Each CIFAR-10 record is one label
    byte then 3072 pixel bytes (1024 R, 1024 G, 1024 B, row-major). CIFAR-100
    records carry a coarse and a fine label byte; the fine label is used.
    """
    if os.path.isfile(os.path.join(path, CIFAR100_TRAIN_FILES[0])):
        name, num_classes, label_bytes, label_offset = "cifar100", 100, 2, 1
        train_files, test_files = CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES
    else:
        name, num_classes, label_bytes, label_offset = "cifar10", 10, 1, 0
        train_files, test_files = CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES

    parts, labels, tags = [], [], []
    for tag, files in (("train", train_files), ("test", test_files)):
        for file_name in files:
            images, file_labels = _read_cifar_file(os.path.join(path, file_name), label_bytes, label_offset)
            parts.append(images)
            labels.append(file_labels)
            tags += [tag] * len(file_labels)
            logger.info("read %d records from %s", len(file_labels), file_name)
    raw = np.concatenate(parts).astype(np.float32) / 255.0
    images, mean, std = _normalize(raw, np.asarray(tags))
    return Dataset(name, images, np.concatenate(labels), tags, num_classes, mean, std)


def load_dataset(dataset_config, seed=None) -> Dataset:
    seed = dataset_config.seed if seed is None else seed
    if dataset_config.name in TOY_DATASETS:
        return load_toy_dataset(dataset_config.name, dataset_config.num_samples, seed, dataset_config.test_fraction)
    return load_cifar(dataset_config.path)
