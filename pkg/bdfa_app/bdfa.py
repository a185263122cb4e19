#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Experiment harness: train a desk-scale victim, quantize it, distill an
attack batch from it and run every attack mode, once per seed.
"""

import copy
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

import bdfa_attack
import bdfa_data
import bdfa_distill
import bdfa_model
import bdfa_quant
import bdfa_tensor
from bdfa_config import AttackConfig, ExperimentConfig, TrainConfig
from bdfa_errors import BdfaError, DatasetError, DivergenceError, NonFiniteError

logger = logging.getLogger(__name__)

AGGREGATE_FILE = "aggregate.csv"
REPORT_FILE = "report.json"
CONFIG_FILE = "config.json"
AGGREGATE_COLUMNS = ["mode", "flip", "mean", "min", "max", "seeds"]


def evaluate(model, dataset, batch_size: int = 256):
    """
    Top-1 accuracy and mean cross-entropy in eval mode. Argmax ties resolve to
    the lowest class index.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty split (%s)" % dataset.name)
    correct = 0
    total_loss = 0.0
    with torch.no_grad():
        for x, y in dataset.batches(batch_size):
            logits = bdfa_model.forward(model, x, mode="eval")
            correct += int((torch.argmax(logits, dim=1) == y).sum())
            total_loss += bdfa_tensor.forward_op("softmax_cross_entropy", logits, y).item() * len(y)
    return correct / len(dataset), total_loss / len(dataset)


def _scheduler(optimizer, train_config: TrainConfig):
    if train_config.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=train_config.epochs)
    if train_config.lr_schedule == "step":
        return torch.optim.lr_scheduler.StepLR(optimizer, step_size=max(1, train_config.epochs // 2), gamma=0.1)
    return None


def train(model, dataset, train_config: TrainConfig = None, progress: bool = False):
    """
    SGD with momentum on cross-entropy over the train split. BN running
    statistics follow their momentum. Returns (model, per-epoch metrics).

    Raises:
        DivergenceError: a non-finite loss appeared (carries the epoch).
    """
    train_config = train_config or TrainConfig()
    train_split = dataset.split("train")
    test_split = dataset.split("test")
    generator = bdfa_tensor.make_generator(train_config.seed)
    model.requires_grad_(True)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=train_config.learning_rate,
        momentum=train_config.momentum,
        weight_decay=train_config.weight_decay,
    )
    scheduler = _scheduler(optimizer, train_config)
    metrics = []
    for epoch in tqdm(range(1, train_config.epochs + 1), desc="train", disable=not progress):
        epoch_loss, epoch_correct = 0.0, 0
        for x, y in train_split.batches(train_config.batch_size, shuffle=True, generator=generator):
            optimizer.zero_grad()
            try:
                logits = bdfa_model.forward(model, x, mode="train")
                loss = bdfa_tensor.forward_op("softmax_cross_entropy", logits, y)
            except NonFiniteError as e:
                raise DivergenceError("training diverged in epoch %d: %s" % (epoch, e), step=epoch)
            if not bool(torch.isfinite(loss.detach())):
                raise DivergenceError("training diverged in epoch %d" % epoch, step=epoch)
            bdfa_tensor.backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(y)
            epoch_correct += int((torch.argmax(logits.detach(), dim=1) == y).sum())
        if scheduler is not None:
            scheduler.step()
        entry = {"epoch": epoch, "loss": epoch_loss / len(train_split), "accuracy": epoch_correct / len(train_split)}
        if len(test_split) > 0:
            entry["test_accuracy"], entry["test_loss"] = evaluate(model, test_split)
        metrics.append(entry)
        logger.info("epoch %d: %s", epoch, ", ".join("%s %.4f" % (k, v) for k, v in entry.items() if k != "epoch"))
    model.requires_grad_(False)
    return model, metrics


def attack_batch(mode: str, dataset, distilled=None, attack_config: AttackConfig = None):
    """
    The (X, y) the search differentiates: the distilled batch for bdfa (and
    random), a real train batch with true labels for bfa, projected noise with
    random labels for noise.
    """
    attack_config = attack_config or AttackConfig()
    if mode in ("bdfa", "random") and distilled is not None:
        return distilled.x, distilled.labels
    if mode == "bfa":
        return dataset.split("train").sample_batch(attack_config.batch_size, attack_config.seed)
    batch_size = len(distilled) if distilled is not None else attack_config.batch_size
    shape = (batch_size,) + tuple(dataset.input_shape)
    return bdfa_distill.init_batch(shape, dataset.num_classes, attack_config.seed)


def _seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed)


def run_seed(experiment_config: ExperimentConfig, seed: int, progress: bool = False):
    """
    Runs every stage for one seed under output_folder/seed_<seed>. Returns
    (summary, error_messages); a failed stage skips the stages that need it.
    """
    experiment_config = copy.deepcopy(experiment_config)
    bdfa_tensor.set_precision(experiment_config.precision)
    _seed_everything(seed)
    seed_folder = os.path.join(experiment_config.output_folder, "seed_%d" % seed)
    os.makedirs(seed_folder, exist_ok=True)
    summary = {"seed": seed, "modes": {}}
    error_messages = []

    try:
        dataset = bdfa_data.load_dataset(experiment_config.dataset, seed=seed)
        model = bdfa_model.build_victim(
            experiment_config.model.arch,
            dataset.input_shape,
            dataset.num_classes,
            seed=seed,
            width=experiment_config.model.width,
            bn_momentum=experiment_config.model.bn_momentum,
        )
        experiment_config.train.seed = seed
        model, metrics = train(model, dataset, experiment_config.train, progress=progress)
        bdfa_model.save_model(model, os.path.join(seed_folder, "model"))
        test_split = dataset.split("test")
        summary["train_metrics"] = metrics
        summary["float_accuracy"] = evaluate(model, test_split)[0]

        quantized = bdfa_quant.quantize_model(model, experiment_config.quantize.bits)
        bdfa_model.save_model(quantized, os.path.join(seed_folder, "quantized"))
        summary["quantized_accuracy"] = evaluate(quantized, test_split)[0]
    except BdfaError as e:
        error_messages.append("seed %d: victim stage failed: %s" % (seed, e))
        return summary, error_messages

    distilled = None
    if any(mode in ("bdfa", "random") for mode in experiment_config.modes):
        try:
            experiment_config.distill.seed = seed
            distilled = bdfa_distill.distill(quantized, experiment_config.distill, progress=progress)
            distill_folder = os.path.join(seed_folder, "distilled")
            bdfa_distill.save_distilled(distilled, distill_folder)
            bdfa_distill.save_preview(distilled, os.path.join(distill_folder, "preview.png"))
            summary["distill"] = {
                "initial_bn_loss": distilled.initial_bn_loss,
                "final_bn_loss": distilled.final_bn_loss,
                "final_dnn_loss": distilled.final_dnn_loss,
            }
        except BdfaError as e:
            error_messages.append("seed %d: distill stage failed: %s" % (seed, e))

    for mode in experiment_config.modes:
        if mode == "bdfa" and distilled is None:
            error_messages.append("seed %d: bdfa skipped, no distilled batch" % seed)
            continue
        attack_config = AttackConfig()
        attack_config.update(experiment_config.attack.fields())
        attack_config.mode = mode
        attack_config.seed = seed
        victim = quantized.clone()
        try:
            batch = attack_batch(mode, dataset, distilled, attack_config)
            trace = bdfa_attack.run_attack(
                victim, batch, attack_config, evaluator=lambda m: evaluate(m, test_split)[0], progress=progress
            )
            bdfa_attack.save_trace(trace, os.path.join(seed_folder, mode))
            summary["modes"][mode] = {
                "flips": trace.num_flips,
                "final_accuracy": trace.accuracy_series()[-1],
                "flips_to_threshold": trace.flips_to_threshold(experiment_config.threshold),
                "stop_reason": trace.stop_reason,
                "evaluations": trace.evaluations,
            }
        except BdfaError as e:
            partial = getattr(e, "trace", None)
            if partial is not None:
                bdfa_attack.save_trace(partial, os.path.join(seed_folder, mode))
            error_messages.append("seed %d: %s attack failed: %s" % (seed, mode, e))
    return summary, error_messages


def _run_seed_job(arguments):
    experiment_config, seed = arguments
    return run_seed(experiment_config, seed, progress=False)


def aggregate_traces(traces):
    """
    traces: {mode: {seed: AttackTrace}}. One row per (mode, flip) with mean,
    min and max accuracy over seeds; a trace that stopped early holds its last
    accuracy for the remaining flip counts.
    """
    rows = []
    for mode, by_seed in traces.items():
        series = {seed: pd.Series(trace.accuracy_series(), dtype=float) for seed, trace in by_seed.items()}
        if not series:
            continue
        frame = pd.DataFrame(series).ffill()
        for flip, values in frame.iterrows():
            rows.append(
                {
                    "mode": mode,
                    "flip": int(flip),
                    "mean": values.mean(),
                    "min": values.min(),
                    "max": values.max(),
                    "seeds": int(values.count()),
                }
            )
    return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)


def collect_traces(output_folder: str, seeds, modes):
    traces = {}
    for mode in modes:
        traces[mode] = {}
        for seed in seeds:
            folder = os.path.join(output_folder, "seed_%d" % seed, mode)
            if os.path.isfile(os.path.join(folder, bdfa_attack.TRACE_JSON)):
                traces[mode][seed] = bdfa_attack.load_trace(folder)
    return traces


def run_experiment(experiment_config: ExperimentConfig, progress: bool = None):
    """
    Runs all seeds and writes aggregate.csv and report.json into
    output_folder. Returns (output_folder, error_messages); a failed seed or
    stage is reported and the remaining work continues.
    """
    error_messages = experiment_config.check_valid()
    if error_messages:
        return None, error_messages
    progress = experiment_config.progress if progress is None else progress
    output_folder = experiment_config.output_folder
    os.makedirs(output_folder, exist_ok=True)
    with open(os.path.join(output_folder, CONFIG_FILE), "w") as config_file:
        json.dump(experiment_config.to_dict(), config_file, indent=2, sort_keys=True)

    jobs = [(experiment_config, seed) for seed in experiment_config.seeds]
    if experiment_config.workers > 1:
        with ProcessPoolExecutor(max_workers=experiment_config.workers) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [
            run_seed(config, seed, progress=False) for config, seed in tqdm(jobs, desc="seeds", disable=not progress)
        ]

    summaries = {}
    for summary, seed_errors in results:
        summary["errors"] = seed_errors
        summaries[str(summary["seed"])] = summary
        error_messages += seed_errors

    traces = collect_traces(output_folder, experiment_config.seeds, experiment_config.modes)
    aggregate = aggregate_traces(traces)
    aggregate.to_csv(os.path.join(output_folder, AGGREGATE_FILE), index=False)

    flips_to_threshold = {}
    for mode, by_seed in traces.items():
        counts = [trace.flips_to_threshold(experiment_config.threshold) for trace in by_seed.values()]
        reached = [count for count in counts if count is not None]
        flips_to_threshold[mode] = {
            "mean": float(np.mean(reached)) if reached else None,
            "reached": len(reached),
            "runs": len(counts),
        }
    report = {
        "name": experiment_config.name,
        "network": experiment_config.model.arch,
        "dataset": experiment_config.dataset.name,
        "threshold": experiment_config.threshold,
        "max_flips": experiment_config.attack.max_flips,
        "flips_to_threshold": flips_to_threshold,
        "seeds": summaries,
        "errors": error_messages,
    }
    with open(os.path.join(output_folder, REPORT_FILE), "w") as report_file:
        json.dump(report, report_file, indent=2, sort_keys=True)
    logger.info("experiment %s written to %s (%d errors)", experiment_config.name, output_folder, len(error_messages))
    return output_folder, error_messages
