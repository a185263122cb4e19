#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Per-layer symmetric q-bit weight quantization and its two's-complement bit view.

A weight is w = delta * code with
code = -b[q-1] * 2^(q-1) + sum_{i < q-1} b[i] * 2^i, so the loss gradient with
respect to bit i is dL/dw * delta * 2^i (and * -2^(q-1) for the sign bit).
"""

import json
import logging
from typing import NamedTuple, Optional

import numpy as np
import torch

import bdfa_tensor
from bdfa_errors import QuantizationError, ShapeError

logger = logging.getLogger(__name__)

MIN_BITS = 2
MAX_BITS = 8


class BitAddress(NamedTuple):
    """Field order is the documented tie-break order."""

    layer_id: int
    weight_index: int
    bit_position: int


def _check_bits(q):
    if not MIN_BITS <= q <= MAX_BITS:
        raise ValueError("q must be in [%d, %d], got %s" % (MIN_BITS, MAX_BITS, q))


def flip(code: int, bit: int, q: int = 8) -> int:
    """Toggles one bit of a signed q-bit two's-complement code."""
    _check_bits(q)
    if not 0 <= bit < q:
        raise ValueError("bit %s out of range [0, %d)" % (bit, q))
    if not -(1 << (q - 1)) <= code < (1 << (q - 1)):
        raise ValueError("code %s is not a signed %d-bit value" % (code, q))
    unsigned = (int(code) & ((1 << q) - 1)) ^ (1 << bit)
    return unsigned - (1 << q) if unsigned >= (1 << (q - 1)) else unsigned


def bit_ladder(q: int, dtype=None):
    """Place value of every bit, sign bit negative."""
    ladder = [float(1 << i) for i in range(q - 1)] + [-float(1 << (q - 1))]
    return torch.tensor(ladder, dtype=dtype or bdfa_tensor.get_dtype())


def code_bits(codes, q: int = 8):
    """(num_weights, q) tensor of 0/1 bits, bit 0 first."""
    unsigned = codes.reshape(-1).to(torch.int16) & ((1 << q) - 1)
    shifts = torch.arange(q, dtype=torch.int16)
    return (unsigned.unsqueeze(1) >> shifts) & 1


class QuantizedLayer:
    """
    Integer codes, step size and bit width of one conv/linear weight tensor.
    Codes keep the weight's shape; weight indices address the flattened view.
    """

    def __init__(self, codes, delta: float, q: int = 8, layer_id: int = 0):
        _check_bits(q)
        if not delta > 0:
            raise QuantizationError("layer %s: step size must be positive, got %r" % (layer_id, delta))
        raw = torch.as_tensor(codes).to(torch.int64)
        low, high = -(1 << (q - 1)), (1 << (q - 1)) - 1
        if bool((raw < low).any()) or bool((raw > high).any()):
            raise QuantizationError("layer %d: codes exceed the signed %d-bit range" % (layer_id, q))
        self.codes = raw.to(torch.int8)
        self.delta = float(delta)
        self.q = int(q)
        self.layer_id = int(layer_id)

    @property
    def num_weights(self):
        return self.codes.numel()

    @property
    def num_bits(self):
        return self.num_weights * self.q

    def dequantize(self):
        return self.codes.to(bdfa_tensor.get_dtype()) * self.delta

    def get_code(self, weight_index: int) -> int:
        return int(self.codes.view(-1)[weight_index])

    def set_code(self, weight_index: int, code: int):
        self.codes.view(-1)[weight_index] = code

    def flip_bit(self, weight_index: int, bit: int):
        if not 0 <= weight_index < self.num_weights:
            raise IndexError(
                "layer %d: weight index %d out of range [0, %d)" % (self.layer_id, weight_index, self.num_weights)
            )
        before = self.get_code(weight_index)
        after = flip(before, bit, self.q)
        self.set_code(weight_index, after)
        return before, after

    def bits(self):
        return code_bits(self.codes, self.q)

    def copy(self):
        return QuantizedLayer(self.codes.clone(), self.delta, self.q, self.layer_id)

    def __repr__(self):
        return "QuantizedLayer(id=%d, q=%d, delta=%.6g, weights=%d)" % (
            self.layer_id,
            self.q,
            self.delta,
            self.num_weights,
        )


def quantize_weight(weight, q: int = 8, layer_id: int = 0) -> QuantizedLayer:
    """
    delta = max|W| / (2^(q-1) - 1), codes = round-half-even(W / delta).
    The scaling runs in float64 as W * qmax / max|W| so exact halves stay exact.
    """
    _check_bits(q)
    values = weight.detach().to(torch.float64)
    max_abs = float(values.abs().max())
    if max_abs == 0.0:
        raise QuantizationError("layer %d: all-zero weight tensor, step size undefined" % layer_id)
    qmax = (1 << (q - 1)) - 1
    codes = torch.clamp(torch.round(values * qmax / max_abs), -qmax, qmax)
    return QuantizedLayer(codes.to(torch.int8), max_abs / qmax, q, layer_id)


def quantize_model(model, q: int = 8):
    """
    Returns a copy of model whose conv and linear weights are QuantizedLayers.
    Biases and BN parameters stay in float.
    """
    quantized = model.clone()
    for index, layer in quantized.attackable_layers():
        layer.quant = quantize_weight(layer.params.pop("weight"), q, layer_id=index)
        logger.info("quantized layer %d (%s): %r", index, layer.kind, layer.quant)
    return quantized


def bit_gradients(layer: QuantizedLayer, weight_grads):
    """
    dL/db for every bit, flattened weight-major: entry weight_index * q + bit.
    weight_grads is dL/dw through the dequantized weight (straight-through).
    """
    grads = torch.as_tensor(weight_grads).reshape(-1)
    if grads.numel() != layer.num_weights:
        raise ShapeError("bit_gradients: %d weight gradients for %d weights" % (grads.numel(), layer.num_weights))
    ladder = bit_ladder(layer.q, dtype=grads.dtype if grads.is_floating_point() else None)
    return (grads.unsqueeze(1) * layer.delta * ladder).reshape(-1)


def _popcount(values):
    return int(np.unpackbits(values.numpy().astype(np.uint8)).sum())


def hamming_distance(original_codes, current_codes, q: int = 8) -> int:
    """
    Number of differing bits between two code arrays, or two equally long
    lists of per-layer code arrays.
    """
    if isinstance(original_codes, (list, tuple)):
        if len(original_codes) != len(current_codes):
            raise ShapeError("hamming_distance: %d layers vs %d" % (len(original_codes), len(current_codes)))
        return sum(hamming_distance(a, b, q) for a, b in zip(original_codes, current_codes))
    original = torch.as_tensor(original_codes).reshape(-1)
    current = torch.as_tensor(current_codes).reshape(-1)
    if original.numel() != current.numel():
        raise ShapeError("hamming_distance: lengths %d and %d differ" % (original.numel(), current.numel()))
    mask = (1 << q) - 1
    return _popcount((original.to(torch.int16) ^ current.to(torch.int16)) & mask)


def snapshot_codes(model):
    """Copies of every quantized layer's codes keyed by layer id."""
    return {layer.quant.layer_id: layer.quant.codes.clone() for _, layer in model.quantized_layers()}


def model_hamming_distance(original_snapshot, model) -> int:
    total = 0
    for _, layer in model.quantized_layers():
        total += hamming_distance(original_snapshot[layer.quant.layer_id], layer.quant.codes, layer.quant.q)
    return total


class FlipRecord:
    """One committed flip. Records are appended to a trace and never edited."""

    def __init__(
        self,
        address: BitAddress,
        code_before: int,
        code_after: int,
        loss_before: float,
        loss_after: float,
        accuracy_after: Optional[float] = None,
        q: int = 8,
    ):
        if flip(code_before, address.bit_position, q) != code_after:
            raise ValueError("flip record %s: %d -> %d is not a single-bit toggle" % (address, code_before, code_after))
        self.address = BitAddress(*address)
        self.code_before = int(code_before)
        self.code_after = int(code_after)
        self.loss_before = float(loss_before)
        self.loss_after = float(loss_after)
        self.accuracy_after = accuracy_after
        self.q = q

    def to_dict(self):
        return {
            "layer_id": self.address.layer_id,
            "weight_index": self.address.weight_index,
            "bit_position": self.address.bit_position,
            "code_before": self.code_before,
            "code_after": self.code_after,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "accuracy_after": self.accuracy_after,
            "q": self.q,
        }

    @classmethod
    def from_dict(cls, values):
        address = BitAddress(values["layer_id"], values["weight_index"], values["bit_position"])
        return cls(
            address,
            values["code_before"],
            values["code_after"],
            values["loss_before"],
            values["loss_after"],
            values.get("accuracy_after"),
            values.get("q", 8),
        )

    def __repr__(self):
        return "FlipRecord(%s, %d -> %d, loss %.4f -> %.4f)" % (
            tuple(self.address),
            self.code_before,
            self.code_after,
            self.loss_before,
            self.loss_after,
        )


def live_flip_count(records) -> int:
    """Distinct addresses flipped an odd number of times."""
    counts = {}
    for record in records:
        counts[record.address] = counts.get(record.address, 0) + 1
    return sum(1 for count in counts.values() if count % 2 == 1)


def write_flip_records(records, path: str):
    with open(path, "w") as out_file:
        for record in records:
            out_file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    return path


def read_flip_records(path: str):
    with open(path) as in_file:
        return [FlipRecord.from_dict(json.loads(line)) for line in in_file if line.strip()]
