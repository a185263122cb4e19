#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Victim network as an ordered layer list with BN running statistics.

Residual connections are `residual_add` layers that name the index of an
earlier layer whose output is added to the running activation.
"""

import copy
import hashlib
import json
import logging
import os
from typing import List, Optional, Tuple

import numpy as np
import torch

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
from bdfa_quant import QuantizedLayer

logger = logging.getLogger(__name__)

LAYER_KINDS = ["conv2d", "linear", "batchnorm2d", "relu", "maxpool2d", "avgpool2d", "residual_add", "flatten"]
MODES = ["train", "eval"]
ARCHITECTURES = ["plain", "residual"]

BN_EPS = 1e-5
FORMAT_NAME = "bdfa-model"
FORMAT_VERSION = 1
BLOB_MAGIC = b"BDFABLOB"
MANIFEST_FILE = "manifest.json"
BLOB_FILE = "tensors.bin"

_NUMPY_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int8": np.dtype("i1")}
_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int8": torch.int8}


class BNStats:
    def __init__(self, channels: int, momentum: float = 0.1):
        self.running_mean = torch.zeros(channels)
        self.running_var = torch.ones(channels)
        self.momentum = momentum

    @torch.no_grad()
    def update(self, batch_mean, batch_var):
        # Population variance, the same convention the normalization uses.
        self.running_mean.mul_(1.0 - self.momentum).add_(self.momentum * batch_mean.detach())
        self.running_var.mul_(1.0 - self.momentum).add_(self.momentum * batch_var.detach())


class LayerSpec:
    """
    One entry of the ordered layer list.

    Attributes:
        kind (str): one of LAYER_KINDS.
        hyper (dict): stride/pad/kernel and channel counts as applicable.
        params (dict): float tensors, "weight"/"bias" for conv2d and linear, "gamma"/"beta" for batchnorm2d.
        bn_stats (BNStats): running statistics, batchnorm2d only.
        skip_from (int): index of the layer whose output residual_add adds in.
        quant (QuantizedLayer): replaces params["weight"] once the model is quantized.
    """

    def __init__(self, kind: str, hyper=None, params=None, bn_stats=None, skip_from=None):
        if kind not in LAYER_KINDS:
            raise ValueError("unknown layer kind %r" % kind)
        self.kind = kind
        self.hyper = dict(hyper or {})
        self.params = dict(params or {})
        self.bn_stats = bn_stats
        self.skip_from = skip_from
        self.quant: Optional[QuantizedLayer] = None

    @property
    def attackable(self):
        return self.kind in ("conv2d", "linear")

    def weight(self):
        if self.quant is not None:
            return self.quant.dequantize()
        return self.params["weight"]

    def __repr__(self):
        return "LayerSpec(%s, %s)" % (self.kind, self.hyper)


class ModelGraph:
    def __init__(
        self, layers: List[LayerSpec], num_classes: int, input_shape: Tuple[int, int, int], arch: str = "custom"
    ):
        self.layers = layers
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.arch = arch
        self.mode = "eval"
        self.last_bn_batch_stats = None
        self.weight_leaves = {}
        self.validate()

    def validate(self):
        heads = [i for i, layer in enumerate(self.layers) if layer.attackable]
        if not heads or self.layers[heads[-1]].kind != "linear":
            raise ConsistencyError("consistency error: model must end in a linear head")
        head = self.layers[heads[-1]]
        head_out = head.quant.codes.shape[0] if head.quant is not None else head.params["weight"].shape[0]
        if head_out != self.num_classes:
            raise ConsistencyError(
                "consistency error: declared %d classes but head outputs %d" % (self.num_classes, head_out)
            )
        for index, layer in enumerate(self.layers):
            if layer.attackable and "weight" not in layer.params and layer.quant is None:
                raise ConsistencyError("consistency error: layer %d (%s) has no weight" % (index, layer.kind))
            if layer.kind == "batchnorm2d":
                channels = layer.params["gamma"].shape[0]
                if layer.bn_stats is None or layer.bn_stats.running_mean.shape[0] != channels:
                    raise ConsistencyError(
                        "consistency error: layer %d BN statistics do not match %d channels" % (index, channels)
                    )
                if bool((layer.bn_stats.running_var < 0).any()):
                    raise ConsistencyError("consistency error: layer %d has negative running variance" % index)
            if layer.kind == "residual_add" and (layer.skip_from is None or not 0 <= layer.skip_from < index):
                raise ConsistencyError(
                    "consistency error: layer %d skips from invalid index %s" % (index, layer.skip_from)
                )

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def bn_layers(self):
        return [layer for layer in self.layers if layer.kind == "batchnorm2d"]

    def attackable_layers(self):
        return [(index, layer) for index, layer in enumerate(self.layers) if layer.attackable]

    def quantized_layers(self):
        return [(index, layer) for index, layer in enumerate(self.layers) if layer.quant is not None]

    def parameters(self):
        tensors = []
        for layer in self.layers:
            for name, value in layer.params.items():
                if name == "weight" and layer.quant is not None:
                    continue
                tensors.append(value)
        return tensors

    def requires_grad_(self, flag: bool):
        for value in self.parameters():
            value.requires_grad_(flag)
        return self

    def clone(self):
        twin = copy.copy(self)
        twin.layers = copy.deepcopy(self.layers)
        twin.last_bn_batch_stats = None
        twin.weight_leaves = {}
        return twin

    def __call__(self, x, mode=None, **kwargs):
        return forward(self, x, mode=mode, **kwargs)


def _kaiming_uniform(shape, generator):
    weight = torch.empty(shape)
    torch.nn.init.kaiming_uniform_(weight, mode="fan_in", nonlinearity="relu", generator=generator)
    return weight


def conv_layer(in_channels, out_channels, kernel=3, stride=1, pad=1, generator=None, bias=False):
    params = {"weight": _kaiming_uniform((out_channels, in_channels, kernel, kernel), generator)}
    if bias:
        params["bias"] = torch.zeros(out_channels)
    hyper = {"in_channels": in_channels, "out_channels": out_channels, "kernel": kernel, "stride": stride, "pad": pad}
    return LayerSpec("conv2d", hyper, params)


def linear_layer(in_features, out_features, generator=None):
    params = {"weight": _kaiming_uniform((out_features, in_features), generator), "bias": torch.zeros(out_features)}
    return LayerSpec("linear", {"in_features": in_features, "out_features": out_features}, params)


def batchnorm_layer(channels, momentum=0.1):
    params = {"gamma": torch.ones(channels), "beta": torch.zeros(channels)}
    return LayerSpec("batchnorm2d", {"channels": channels, "eps": BN_EPS}, params, bn_stats=BNStats(channels, momentum))


def build_victim(arch: str, input_shape, num_classes: int, seed: int = 0, width: int = 8, bn_momentum: float = 0.1):
    """
    Builds the versioned desk-scale victim: two conv-BN blocks, an optional
    residual skip around the second block, 2x2 max pooling and a linear head.
    """
    if arch not in ARCHITECTURES:
        raise ValueError("arch must be one of %s, got %r" % (ARCHITECTURES, arch))
    channels, height, width_px = input_shape
    generator = bdfa_tensor.make_generator(seed)
    layers = [
        conv_layer(channels, width, generator=generator),
        batchnorm_layer(width, bn_momentum),
        LayerSpec("relu"),
        conv_layer(width, width, generator=generator),
        batchnorm_layer(width, bn_momentum),
    ]
    if arch == "residual":
        layers.append(LayerSpec("residual_add", skip_from=2))
    layers += [
        LayerSpec("relu"),
        LayerSpec("maxpool2d", {"kernel": 2}),
        LayerSpec("flatten"),
        linear_layer(width * (height // 2) * (width_px // 2), num_classes, generator=generator),
    ]
    return ModelGraph(layers, num_classes, input_shape, arch=arch)


def _channel_std(var):
    # sqrt has an infinite slope at 0; a constant channel gets std 0 with zero gradient.
    positive = var > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, var, torch.ones_like(var))), torch.zeros_like(var))


def _apply_layer(layer: LayerSpec, h, outputs, mode, update_running_stats, batch_stats, weight=None):
    if layer.attackable:
        if layer.kind == "conv2d":
            stride, pad = layer.hyper["stride"], layer.hyper["pad"]
            return bdfa_tensor.forward_op("conv2d", h, weight, layer.params.get("bias"), stride=stride, pad=pad)
        return bdfa_tensor.forward_op("linear", h, weight, layer.params.get("bias"))
    if layer.kind == "batchnorm2d":
        eps = layer.hyper.get("eps", BN_EPS)
        if mode == "train":
            mean, var = bdfa_tensor.channel_stats(h)
            batch_stats.append((mean, _channel_std(var)))
            if update_running_stats:
                layer.bn_stats.update(mean, var)
        else:
            mean, var = layer.bn_stats.running_mean, layer.bn_stats.running_var
        gamma, beta = layer.params["gamma"], layer.params["beta"]
        return bdfa_tensor.forward_op("batchnorm2d", h, gamma, beta, mean=mean, var=var, eps=eps)
    if layer.kind in ("maxpool2d", "avgpool2d"):
        return bdfa_tensor.forward_op(layer.kind, h, kernel=layer.hyper["kernel"], stride=layer.hyper.get("stride"))
    if layer.kind == "residual_add":
        return bdfa_tensor.forward_op("add", h, outputs[layer.skip_from])
    return bdfa_tensor.forward_op(layer.kind, h)


def forward(
    model: ModelGraph, x, mode: str = None, update_running_stats: bool = True, track_weight_grads: bool = False
):
    """
    Runs the layer list on x[N, C, H, W] and returns logits[N, K].

    In train mode BN normalizes with batch statistics, records (mean, std) per
    BN layer in model.last_bn_batch_stats and, unless update_running_stats is
    False, folds them into the running statistics. In eval mode BN uses the
    running statistics. With track_weight_grads every quantized layer's
    dequantized weight becomes a grad-tracking leaf in model.weight_leaves.
    """
    mode = mode or model.mode
    if mode not in MODES:
        raise ValueError("mode must be one of %s, got %r" % (MODES, mode))
    if x.dim() != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(
            "forward: input %s does not match model input [N, %s]" % (list(x.shape), list(model.input_shape))
        )

    batch_stats = []
    outputs = []
    model.weight_leaves = {}
    h = x
    for index, layer in enumerate(model.layers):
        weight = None
        if layer.attackable:
            weight = layer.weight()
            if track_weight_grads and layer.quant is not None:
                weight = weight.detach().requires_grad_(True)
                model.weight_leaves[index] = weight
        try:
            h = _apply_layer(layer, h, outputs, mode, update_running_stats, batch_stats, weight)
        except NonFiniteError as e:
            raise NonFiniteError("forward: layer %d (%s): %s" % (index, layer.kind, e))
        if not bool(torch.isfinite(h.detach()).all()):
            raise NonFiniteError("forward: layer %d (%s) produced non-finite activations" % (index, layer.kind))
        outputs.append(h)

    if mode == "train":
        model.last_bn_batch_stats = batch_stats
    return h


def capture_bn_batch_stats(model: ModelGraph, x=None):
    """
    Per BN layer (mean, std) of the layer input over (N, H, W), population
    variance. With x, runs a batch-statistics forward that leaves the running
    statistics untouched; without x, returns what the last train-mode forward
    recorded. The returned tensors stay on the tape so losses built from them
    can be differentiated with respect to x.
    """
    if x is not None:
        forward(model, x, mode="train", update_running_stats=False)
    if model.last_bn_batch_stats is None:
        raise BNStatsUnavailableError("no train-mode forward has run on this model")
    return model.last_bn_batch_stats


def running_bn_stats(model: ModelGraph):
    """Per BN layer (running mean, running std): the targets distillation matches."""
    return [(layer.bn_stats.running_mean, torch.sqrt(layer.bn_stats.running_var)) for layer in model.bn_layers()]


def _dtype_name(value):
    for name, dtype in _TORCH_DTYPES.items():
        if value.dtype == dtype:
            return name
    raise FormatError("format error: cannot store dtype %s" % value.dtype)


class _BlobWriter:
    def __init__(self):
        self.chunks = [BLOB_MAGIC]
        self.offset = len(BLOB_MAGIC)
        self.entries = {}

    def add(self, key, value):
        name = _dtype_name(value)
        data = value.detach().cpu().numpy().astype(_NUMPY_DTYPES[name], copy=False).tobytes()
        self.entries[key] = {
            "dtype": name,
            "shape": list(value.shape),
            "offset": self.offset,
            "nbytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
        self.chunks.append(data)
        self.offset += len(data)
        return key


def save_model(model: ModelGraph, path: str):
    """Writes manifest.json plus one little-endian tensor blob into the directory path."""
    os.makedirs(path, exist_ok=True)
    blob = _BlobWriter()
    layers = []
    for index, layer in enumerate(model.layers):
        entry = {"kind": layer.kind, "hyper": layer.hyper, "skip_from": layer.skip_from, "params": {}}
        for name, value in layer.params.items():
            if name == "weight" and layer.quant is not None:
                continue
            entry["params"][name] = blob.add("layer%d.%s" % (index, name), value)
        if layer.bn_stats is not None:
            entry["bn"] = {
                "momentum": layer.bn_stats.momentum,
                "running_mean": blob.add("layer%d.running_mean" % index, layer.bn_stats.running_mean),
                "running_var": blob.add("layer%d.running_var" % index, layer.bn_stats.running_var),
            }
        if layer.quant is not None:
            entry["quant"] = {
                "q": layer.quant.q,
                "delta": layer.quant.delta,
                "layer_id": layer.quant.layer_id,
                "codes": blob.add("layer%d.codes" % index, layer.quant.codes),
            }
        layers.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "layers": layers,
        "tensors": blob.entries,
    }
    with open(os.path.join(path, BLOB_FILE), "wb") as blob_file:
        blob_file.write(b"".join(blob.chunks))
    with open(os.path.join(path, MANIFEST_FILE), "w") as manifest_file:
        json.dump(manifest, manifest_file, indent=2, sort_keys=True)
    logger.info("saved model (%s, %d layers) to %s", model.arch, len(model.layers), path)
    return path


def _read_manifest(path):
    manifest_path = os.path.join(path, MANIFEST_FILE)
    if not os.path.isfile(manifest_path):
        raise FormatError("format error: %s is missing" % manifest_path)
    try:
        with open(manifest_path) as manifest_file:
            manifest = json.load(manifest_file)
    except (ValueError, UnicodeDecodeError) as e:
        raise FormatError("format error: %s is not valid JSON (%s)" % (manifest_path, e))
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise FormatError("format error: %s is not a %s manifest" % (manifest_path, FORMAT_NAME))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            "version mismatch: %s has format_version %s, expected %d"
            % (manifest_path, manifest.get("format_version"), FORMAT_VERSION)
        )
    missing = [key for key in ("layers", "tensors", "num_classes", "input_shape") if key not in manifest]
    if missing:
        raise FormatError("format error: %s lacks %s" % (manifest_path, ", ".join(missing)))
    return manifest


def _read_tensor(blob, key, entries, blob_path):
    if key not in entries:
        raise FormatError("format error: manifest references unknown tensor %s" % key)
    entry = entries[key]
    start, end = entry["offset"], entry["offset"] + entry["nbytes"]
    if end > len(blob):
        raise TruncatedError(
            "truncated file: %s ends at byte %d, tensor %s needs %d" % (blob_path, len(blob), key, end)
        )
    data = blob[start:end]
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise ChecksumError("checksum failure: tensor %s in %s" % (key, blob_path))
    array = np.frombuffer(data, dtype=_NUMPY_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
    return torch.from_numpy(array)


def load_model(path: str) -> ModelGraph:
    """
    Reads a model directory written by save_model. Raises FormatError,
    VersionError, TruncatedError, ChecksumError or ConsistencyError.
    """
    manifest = _read_manifest(path)
    blob_path = os.path.join(path, BLOB_FILE)
    if not os.path.isfile(blob_path):
        raise TruncatedError("truncated file: %s is missing" % blob_path)
    with open(blob_path, "rb") as blob_file:
        blob = blob_file.read()
    if len(blob) < len(BLOB_MAGIC):
        raise TruncatedError("truncated file: %s has %d bytes, shorter than its header" % (blob_path, len(blob)))
    if blob[: len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise FormatError("format error: bad magic bytes in %s" % blob_path)

    entries = manifest["tensors"]
    layers = []
    try:
        for entry in manifest["layers"]:
            params = {name: _read_tensor(blob, key, entries, blob_path) for name, key in entry["params"].items()}
            layer = LayerSpec(entry["kind"], entry["hyper"], params, skip_from=entry.get("skip_from"))
            if "bn" in entry:
                bn = entry["bn"]
                stats = BNStats(params["gamma"].shape[0], bn["momentum"])
                stats.running_mean = _read_tensor(blob, bn["running_mean"], entries, blob_path)
                stats.running_var = _read_tensor(blob, bn["running_var"], entries, blob_path)
                layer.bn_stats = stats
            if "quant" in entry:
                quant = entry["quant"]
                codes = _read_tensor(blob, quant["codes"], entries, blob_path)
                layer.quant = QuantizedLayer(codes, quant["delta"], quant["q"], quant["layer_id"])
            layers.append(layer)
    except (KeyError, TypeError) as e:
        raise FormatError("format error: malformed layer entry in %s (%s)" % (path, e))
    model = ModelGraph(layers, manifest["num_classes"], manifest["input_shape"], arch=manifest.get("arch", "custom"))
    logger.info("loaded model (%s, %d layers) from %s", model.arch, len(layers), path)
    return model
