#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Progressive bit search over a quantized model.

Each step ranks the bits of every quantized layer by |dL/db| (inner-layer
search), tentatively flips the top candidates of each layer and commits the
single flip that leaves the highest loss on the attack batch (cross-layer
search). The batch is either distilled (bdfa), real (bfa) or projected noise;
the random mode flips uniformly chosen bits instead of searching.
"""

import json
import logging
import math
import os

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

import bdfa_model
import bdfa_quant
import bdfa_tensor
from bdfa_config import AttackConfig
from bdfa_errors import AttackStalledError, ConfigError, ConsistencyError, NonFiniteError, QuantizationError
from bdfa_quant import BitAddress, FlipRecord

logger = logging.getLogger(__name__)

TRACE_JSON = "trace.json"
TRACE_CSV = "trace.csv"
FLIPS_JSONL = "flips.jsonl"
TRACE_COLUMNS = ["flip_index", "loss", "accuracy"]

# Candidate pool growth when no ranked candidate raises the loss.
ESCALATION_FACTOR = 8


class AttackTrace:
    """
    Committed flips of one attack run with the loss/accuracy after each.

    Attributes:
        mode (str): bdfa, bfa, noise or random.
        records (list): FlipRecords in commit order.
        losses (list): attack-batch loss after each flip.
        accuracies (list): evaluation accuracy after each flip, None entries without an evaluation set.
        clean_loss, clean_accuracy (float): values before the first flip.
        evaluations (int): forward passes spent on candidate evaluation.
        stop_reason (str): budget, accuracy_floor or stalled.
        config (dict): AttackConfig fields.
    """

    def __init__(self, mode="bdfa", config=None):
        self.mode = mode
        self.records = []
        self.losses = []
        self.accuracies = []
        self.clean_loss = None
        self.clean_accuracy = None
        self.evaluations = 0
        self.stop_reason = None
        self.config = dict(config or {})

    def append(self, record: FlipRecord, accuracy=None):
        record.accuracy_after = accuracy
        self.records.append(record)
        self.losses.append(record.loss_after)
        self.accuracies.append(accuracy)

    @property
    def num_flips(self):
        return len(self.records)

    def accuracy_series(self):
        """Clean accuracy followed by the accuracy after every flip."""
        return [self.clean_accuracy] + list(self.accuracies)

    def flips_to_threshold(self, threshold: float):
        for flips, accuracy in enumerate(self.accuracy_series()):
            if accuracy is not None and accuracy <= threshold:
                return flips
        return None

    def to_dict(self):
        return {
            "mode": self.mode,
            "config": self.config,
            "clean_loss": self.clean_loss,
            "clean_accuracy": self.clean_accuracy,
            "evaluations": self.evaluations,
            "stop_reason": self.stop_reason,
            "records": [record.to_dict() for record in self.records],
            "losses": self.losses,
            "accuracies": self.accuracies,
        }

    @classmethod
    def from_dict(cls, values):
        trace = cls(values["mode"], values.get("config"))
        trace.clean_loss = values.get("clean_loss")
        trace.clean_accuracy = values.get("clean_accuracy")
        trace.evaluations = values.get("evaluations", 0)
        trace.stop_reason = values.get("stop_reason")
        for record in values["records"]:
            trace.append(FlipRecord.from_dict(record), record.get("accuracy_after"))
        return trace

    def to_frame(self):
        rows = [{"flip_index": 0, "loss": self.clean_loss, "accuracy": self.clean_accuracy}]
        for index, (loss, accuracy) in enumerate(zip(self.losses, self.accuracies), start=1):
            rows.append({"flip_index": index, "loss": loss, "accuracy": accuracy})
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def save_trace(trace: AttackTrace, folder: str):
    os.makedirs(folder, exist_ok=True)
    with open(os.path.join(folder, TRACE_JSON), "w") as trace_file:
        json.dump(trace.to_dict(), trace_file, indent=2, sort_keys=True)
    trace.to_frame().to_csv(os.path.join(folder, TRACE_CSV), index=False)
    bdfa_quant.write_flip_records(trace.records, os.path.join(folder, FLIPS_JSONL))
    return folder


def load_trace(folder: str) -> AttackTrace:
    with open(os.path.join(folder, TRACE_JSON)) as trace_file:
        return AttackTrace.from_dict(json.load(trace_file))


def attack_loss(model, x, y) -> float:
    """Mean cross-entropy of the batch under the model's inference path."""
    with torch.no_grad():
        logits = bdfa_model.forward(model, x, mode="eval")
        return bdfa_tensor.forward_op("softmax_cross_entropy", logits, y).item()


def weight_gradients(model, x, y):
    """dL/dw of every quantized layer, taken through its dequantized weight."""
    logits = bdfa_model.forward(model, x, mode="eval", track_weight_grads=True)
    loss = bdfa_tensor.forward_op("softmax_cross_entropy", logits, y)
    bdfa_tensor.backward(loss)
    grads = {index: leaf.grad.detach() for index, leaf in model.weight_leaves.items()}
    model.weight_leaves = {}
    return loss.item(), grads


def rank_bits_in_layer(layer: bdfa_quant.QuantizedLayer, bit_grads, k: int = 1, direction_filter: bool = True):
    """
    Top-k BitAddresses of a layer by |dL/db|, ties broken by (weight_index,
    bit_position) ascending. With direction_filter only bits whose flip moves
    along the gradient (estimated loss change > 0) qualify. A layer whose bit
    gradients are all zero yields no candidates.
    """
    grads = torch.as_tensor(bit_grads).reshape(layer.num_weights, layer.q)
    if not bool((grads != 0).any()):
        return []
    score = grads.abs().reshape(-1)
    if direction_filter:
        # Flipping 0 -> 1 adds the bit's place value, 1 -> 0 removes it.
        direction = 1 - 2 * layer.bits().to(grads.dtype)
        eligible = torch.nonzero((grads * direction).reshape(-1) > 0).reshape(-1)
    else:
        eligible = torch.arange(score.numel())
    if eligible.numel() == 0:
        return []
    order = torch.sort(score[eligible], descending=True, stable=True).indices[:k]
    return [BitAddress(layer.layer_id, int(flat) // layer.q, int(flat) % layer.q) for flat in eligible[order].tolist()]


def _layer_by_id(model):
    return {layer.quant.layer_id: layer.quant for _, layer in model.quantized_layers()}


def _evaluate_candidates(model, x, y, candidates, trace=None):
    """Tentatively flips each candidate, returns (address, loss) of the best. Codes are restored."""
    layers = _layer_by_id(model)
    best_address, best_loss = None, -math.inf
    for address in candidates:
        quant = layers[address.layer_id]
        quant.flip_bit(address.weight_index, address.bit_position)
        try:
            loss = attack_loss(model, x, y)
        except NonFiniteError:
            loss = math.nan
        finally:
            quant.flip_bit(address.weight_index, address.bit_position)
        if trace is not None:
            trace.evaluations += 1
        if not math.isfinite(loss):
            logger.warning("discarding candidate %s: non-finite loss", tuple(address))
            continue
        logger.debug("candidate %s -> loss %.6f", tuple(address), loss)
        if loss > best_loss or (loss == best_loss and address < best_address):
            best_address, best_loss = address, loss
    return best_address, best_loss


def progressive_search_step(model, batch, attack_config: AttackConfig = None, trace: AttackTrace = None) -> FlipRecord:
    """
    One inner-layer + cross-layer search step; commits exactly one flip.

    When none of the top-k candidates raises the loss the candidate pool grows
    by ESCALATION_FACTOR until one does or every eligible bit was tried, so the
    committed loss never falls below the current loss.

    Raises:
        AttackStalledError: no layer offers a candidate, or no flip raises the loss.
    """
    attack_config = attack_config or AttackConfig()
    x, y = batch
    loss_before, grads = weight_gradients(model, x, y)
    ranked = {}
    for index, layer in model.quantized_layers():
        ranked[index] = (layer.quant, bdfa_quant.bit_gradients(layer.quant, grads[index]))

    k = attack_config.candidates_per_layer
    tried = set()
    while True:
        candidates = []
        for quant, bit_grads in ranked.values():
            candidates += rank_bits_in_layer(quant, bit_grads, k, attack_config.direction_filter)
        fresh = [address for address in candidates if address not in tried]
        if not candidates:
            raise AttackStalledError("attack stalled: no candidate bit in any layer")
        if not fresh:
            raise AttackStalledError("attack stalled: no single flip raises the loss above %.6f" % loss_before)
        address, loss_after = _evaluate_candidates(model, x, y, fresh, trace)
        tried.update(fresh)
        if address is not None and loss_after >= loss_before:
            break
        k *= ESCALATION_FACTOR
        logger.info("no loss-raising flip among %d candidates, widening to k=%d", len(tried), k)

    before, after = _layer_by_id(model)[address.layer_id].flip_bit(address.weight_index, address.bit_position)
    record = FlipRecord(address, before, after, loss_before, loss_after, q=_layer_by_id(model)[address.layer_id].q)
    logger.info(
        "committed flip %s: code %d -> %d, loss %.4f -> %.4f", tuple(address), before, after, loss_before, loss_after
    )
    return record


def random_flip_step(model, batch, rng: np.random.Generator, trace: AttackTrace = None) -> FlipRecord:
    """Flips one uniformly chosen bit of one uniformly chosen quantized layer."""
    x, y = batch
    loss_before = attack_loss(model, x, y)
    layers = [layer.quant for _, layer in model.quantized_layers()]
    quant = layers[int(rng.integers(len(layers)))]
    address = BitAddress(quant.layer_id, int(rng.integers(quant.num_weights)), int(rng.integers(quant.q)))
    before, after = quant.flip_bit(address.weight_index, address.bit_position)
    loss_after = attack_loss(model, x, y)
    if trace is not None:
        trace.evaluations += 1
    return FlipRecord(address, before, after, loss_before, loss_after, q=quant.q)


def _below_floor(accuracy, floor):
    return floor is not None and accuracy is not None and accuracy <= floor


def run_attack(model, batch, attack_config: AttackConfig = None, evaluator=None, progress: bool = False) -> AttackTrace:
    """
    Commits flips in place on model until max_flips are committed, the
    evaluation accuracy reaches accuracy_floor, or the search stalls.

    evaluator(model) -> accuracy is called before the first and after every
    flip; without it accuracy entries are None and only the loss is tracked.

    Raises:
        ConfigError: invalid attack_config.
        QuantizationError: model has no quantized layer.
        AttackStalledError: propagated from the search, with the partial trace on .trace.
    """
    attack_config = attack_config or AttackConfig()
    error_messages = attack_config.check_valid()
    if error_messages:
        raise ConfigError(error_messages)
    if not model.quantized_layers():
        raise QuantizationError("attack needs a quantized model")

    x, y = batch
    trace = AttackTrace(attack_config.mode, attack_config.fields())
    original_codes = bdfa_quant.snapshot_codes(model)
    rng = np.random.default_rng(attack_config.seed)
    trace.clean_loss = attack_loss(model, x, y)
    trace.clean_accuracy = evaluator(model) if evaluator else None
    logger.info(
        "%s attack: clean loss %.4f, clean accuracy %s", attack_config.mode, trace.clean_loss, trace.clean_accuracy
    )

    accuracy = trace.clean_accuracy
    trace.stop_reason = "budget"
    for _ in tqdm(range(attack_config.max_flips), desc="%s flips" % attack_config.mode, disable=not progress):
        if _below_floor(accuracy, attack_config.accuracy_floor):
            trace.stop_reason = "accuracy_floor"
            break
        try:
            if attack_config.mode == "random":
                record = random_flip_step(model, (x, y), rng, trace)
            else:
                record = progressive_search_step(model, (x, y), attack_config, trace)
        except AttackStalledError as e:
            trace.stop_reason = "stalled"
            e.trace = trace
            raise
        accuracy = evaluator(model) if evaluator else None
        trace.append(record, accuracy)
        logger.info("flip %d: loss %.4f, accuracy %s", trace.num_flips, record.loss_after, accuracy)
    else:
        if _below_floor(accuracy, attack_config.accuracy_floor):
            trace.stop_reason = "accuracy_floor"

    distance = bdfa_quant.model_hamming_distance(original_codes, model)
    if distance > attack_config.max_flips:
        raise ConsistencyError("Hamming distance %d exceeds budget %d" % (distance, attack_config.max_flips))
    return trace


def replay_trace(model, records):
    """Re-applies committed flips to a clone of model and returns the clone."""
    replayed = model.clone()
    layers = _layer_by_id(replayed)
    for step, record in enumerate(records):
        quant = layers[record.address.layer_id]
        current = quant.get_code(record.address.weight_index)
        if current != record.code_before:
            raise ConsistencyError(
                "replay step %d: %s holds code %d, record expects %d"
                % (step, tuple(record.address), current, record.code_before)
            )
        quant.flip_bit(record.address.weight_index, record.address.bit_position)
    return replayed


def exhaustive_best_flip(model, batch):
    """
    True-loss argmax over every single-bit flip, ties to the smallest
    (layer_id, weight_index, bit_position). Codes are left unchanged.
    """
    x, y = batch
    candidates = []
    for _, layer in model.quantized_layers():
        quant = layer.quant
        candidates += [BitAddress(quant.layer_id, w, b) for w in range(quant.num_weights) for b in range(quant.q)]
    return _evaluate_candidates(model, x, y, candidates)
