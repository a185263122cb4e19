#!/usr/bin/env python
# -*- coding: utf-8 -*-

import argparse
import json
import logging
import os
import sys
from types import SimpleNamespace

import pandas as pd

import bdfa
import bdfa_attack
import bdfa_data
import bdfa_distill
import bdfa_model
import bdfa_quant
import bdfa_report
import bdfa_tensor
from bdfa_config import ATTACK_MODES, DATASET_NAMES, ExperimentConfig
from bdfa_errors import AttackStalledError, BdfaError, ConfigError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
COMMANDS = ["train", "quantize", "distill", "attack", "evaluate", "experiment", "report"]
TRAIN_METRICS_FILE = "train_metrics.csv"
EVALUATION_FILE = "evaluation.json"
ATTACKED_MODEL_FOLDER = "model"

logger = logging.getLogger("bdfa_cli")


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _common_arguments():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=str, help="TOML experiment config; flags override its values")
    parser.add_argument("--seed", type=int, help="Seed for every random choice of the command")
    parser.add_argument("--out", type=str, help="Output folder")
    parser.add_argument("--stdout", action="store_true", help="Also write the data output to standard output")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings and errors only, no progress bars")
    return parser


def _dataset_arguments(parser):
    parser.add_argument("--dataset", type=str, choices=DATASET_NAMES, help="Dataset name")
    parser.add_argument("--dataset-path", type=str, help="Folder holding the CIFAR binary files")


def parse_arguments(argv=None):
    common = _common_arguments()
    parser = argparse.ArgumentParser(description="Bit-flip attacks on quantized networks without access to real data.")
    commands = parser.add_subparsers(dest="command", required=True, metavar="{%s}" % ",".join(COMMANDS))

    train = commands.add_parser("train", parents=[common], help="Train a desk-scale victim")
    _dataset_arguments(train)
    train.add_argument("--arch", type=str, choices=bdfa_model.ARCHITECTURES, help="Victim architecture")
    train.add_argument("--width", type=int, help="Conv channels")
    train.add_argument("--epochs", type=int, help="Training epochs")

    quantize = commands.add_parser("quantize", parents=[common], help="Quantize a trained model")
    quantize.add_argument("--model", type=str, required=True, help="Model folder")
    quantize.add_argument("--bits", type=int, help="Code width of conv/linear weights")

    distill = commands.add_parser("distill", parents=[common], help="Distill an attack batch from a model")
    distill.add_argument("--model", type=str, required=True, help="Model folder")
    distill.add_argument("--iterations", type=int, help="Optimizer steps on the batch")
    distill.add_argument("--batch-size", type=int, help="Synthetic samples")
    distill.add_argument("--alpha", type=float, help="Weight of the BN statistics loss")
    distill.add_argument("--beta", type=float, help="Weight of the classification loss")

    attack = commands.add_parser("attack", parents=[common], help="Run one attack on a quantized model")
    attack.add_argument("--mode", type=str, choices=ATTACK_MODES, help="Attack mode")
    attack.add_argument("--model", type=str, required=True, help="Quantized model folder")
    attack.add_argument("--distilled", type=str, help="Distilled batch folder (bdfa and random modes)")
    attack.add_argument("--max-flips", type=int, help="Bit flip budget")
    attack.add_argument("--candidates", type=int, help="Ranked candidates evaluated per layer")
    attack.add_argument("--accuracy-floor", type=float, help="Stop once test accuracy is at or below this value")
    _dataset_arguments(attack)

    evaluate = commands.add_parser("evaluate", parents=[common], help="Test accuracy of a model")
    evaluate.add_argument("--model", type=str, required=True, help="Model folder")
    _dataset_arguments(evaluate)

    experiment = commands.add_parser("experiment", parents=[common], help="Run every stage over several seeds")
    experiment.add_argument("--seeds", type=int, nargs="+", help="Seeds to run")
    experiment.add_argument("--modes", type=str, nargs="+", choices=ATTACK_MODES, help="Attack modes to run")
    experiment.add_argument("--workers", type=int, help="Seeds run in parallel")

    report = commands.add_parser("report", parents=[common], help="Chart and summary table of an experiment")
    report.add_argument("folder", type=str, help="Experiment or attack folder")
    return parser.parse_args(argv)


def _override(section, values):
    section.update({key: value for key, value in values.items() if value is not None})


def config_from_arguments(arguments):
    """
    Builds the ExperimentConfig of one invocation: defaults, then the TOML file, then flags.
    """
    config = ExperimentConfig.from_toml(arguments.config) if arguments.config else ExperimentConfig()

    def get(name):
        return getattr(arguments, name, None)

    seed = arguments.seed
    if seed is not None:
        for section in (config.dataset, config.train, config.distill, config.attack):
            section.seed = seed
        config.seeds = [seed]
    if arguments.quiet:
        config.progress = False

    _override(config.dataset, {"name": get("dataset"), "path": get("dataset_path")})
    _override(config.model, {"arch": get("arch"), "width": get("width")})
    _override(config.train, {"epochs": get("epochs")})
    _override(config.quantize, {"bits": get("bits")})
    _override(
        config.distill,
        {"iterations": get("iterations"), "batch_size": get("batch_size"), "alpha": get("alpha"), "beta": get("beta")},
    )
    _override(
        config.attack,
        {
            "mode": get("mode"),
            "max_flips": get("max_flips"),
            "candidates_per_layer": get("candidates"),
            "accuracy_floor": get("accuracy_floor"),
        },
    )
    experiment_values = {"seeds": get("seeds"), "modes": get("modes"), "workers": get("workers")}
    _override(config, dict(experiment_values, output_folder=arguments.out))
    return SimpleNamespace(command=arguments.command, experiment_config=config, arguments=arguments)


def check_arguments(config):
    """Config validation messages for the sections the command uses."""
    experiment_config = config.experiment_config
    arguments = config.arguments
    if config.command == "experiment":
        return experiment_config.check_valid()
    sections = {
        "train": [experiment_config.dataset, experiment_config.model, experiment_config.train],
        "quantize": [experiment_config.quantize],
        "distill": [experiment_config.distill],
        "attack": [experiment_config.dataset, experiment_config.attack],
        "evaluate": [experiment_config.dataset],
        "report": [],
    }[config.command]
    error_messages = []
    for section in sections:
        error_messages += section.check_valid()
    if config.command in ("train", "quantize", "distill", "attack") and not arguments.out:
        error_messages.append("You must choose an output folder")
    if config.command == "attack" and experiment_config.attack.mode == "bdfa" and not arguments.distilled:
        error_messages.append("attack mode bdfa needs --distilled")
    return error_messages


def _emit(arguments, text):
    if arguments.stdout:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def run_train(config):
    experiment_config, arguments = config.experiment_config, config.arguments
    dataset = bdfa_data.load_dataset(experiment_config.dataset)
    model = bdfa_model.build_victim(
        experiment_config.model.arch,
        dataset.input_shape,
        dataset.num_classes,
        seed=experiment_config.train.seed,
        width=experiment_config.model.width,
        bn_momentum=experiment_config.model.bn_momentum,
    )
    model, metrics = bdfa.train(model, dataset, experiment_config.train, progress=experiment_config.progress)
    bdfa_model.save_model(model, arguments.out)
    frame = pd.DataFrame(metrics)
    frame.to_csv(os.path.join(arguments.out, TRAIN_METRICS_FILE), index=False)
    _emit(arguments, frame.to_csv(index=False))


def run_quantize(config):
    arguments = config.arguments
    model = bdfa_model.load_model(arguments.model)
    bits = config.experiment_config.quantize.bits
    quantized = bdfa_quant.quantize_model(model, bits)
    bdfa_model.save_model(quantized, arguments.out)
    logger.info("quantized %d layers to %d bits", len(quantized.quantized_layers()), bits)


def run_distill(config):
    experiment_config, arguments = config.experiment_config, config.arguments
    model = bdfa_model.load_model(arguments.model)
    distilled = bdfa_distill.distill(model, experiment_config.distill, progress=experiment_config.progress)
    bdfa_distill.save_distilled(distilled, arguments.out)
    bdfa_distill.save_preview(distilled, os.path.join(arguments.out, "preview.png"))
    _emit(arguments, pd.DataFrame(distilled.loss_history, columns=bdfa_distill.HISTORY_COLUMNS).to_csv(index=False))


def run_attack(config):
    experiment_config, arguments = config.experiment_config, config.arguments
    attack_config = experiment_config.attack
    model = bdfa_model.load_model(arguments.model)
    dataset = bdfa_data.load_dataset(experiment_config.dataset)
    test_split = dataset.split("test")
    distilled = bdfa_distill.load_distilled(arguments.distilled) if arguments.distilled else None
    batch = bdfa.attack_batch(attack_config.mode, dataset, distilled, attack_config)
    try:
        trace = bdfa_attack.run_attack(
            model,
            batch,
            attack_config,
            evaluator=lambda m: bdfa.evaluate(m, test_split)[0],
            progress=experiment_config.progress,
        )
    except AttackStalledError as e:
        bdfa_attack.save_trace(e.trace, arguments.out)
        raise
    bdfa_attack.save_trace(trace, arguments.out)
    bdfa_model.save_model(model, os.path.join(arguments.out, ATTACKED_MODEL_FOLDER))
    _emit(arguments, trace.to_frame().to_csv(index=False))


def run_evaluate(config):
    experiment_config, arguments = config.experiment_config, config.arguments
    model = bdfa_model.load_model(arguments.model)
    dataset = bdfa_data.load_dataset(experiment_config.dataset)
    accuracy, loss = bdfa.evaluate(model, dataset.split("test"))
    result = {"model": arguments.model, "dataset": dataset.name, "split": "test", "accuracy": accuracy, "loss": loss}
    logger.info("%s on %s: accuracy %.4f, loss %.4f", arguments.model, dataset.name, accuracy, loss)
    if arguments.out:
        os.makedirs(arguments.out, exist_ok=True)
        with open(os.path.join(arguments.out, EVALUATION_FILE), "w") as evaluation_file:
            json.dump(result, evaluation_file, indent=2, sort_keys=True)
    _emit(arguments, json.dumps(result, sort_keys=True))


def run_experiment(config):
    arguments = config.arguments
    output_folder, error_messages = bdfa.run_experiment(config.experiment_config)
    for message in error_messages:
        logger.warning(message)
    bdfa_report.report(output_folder)
    with open(os.path.join(output_folder, bdfa.AGGREGATE_FILE)) as aggregate_file:
        _emit(arguments, aggregate_file.read())
    if error_messages:
        report_path = os.path.join(output_folder, bdfa.REPORT_FILE)
        raise BdfaError("%d stage failures, see %s" % (len(error_messages), report_path))


def run_report(config):
    arguments = config.arguments
    _, markdown_path = bdfa_report.report(arguments.folder, arguments.out)
    with open(markdown_path) as markdown_file:
        _emit(arguments, markdown_file.read())


RUNNERS = {
    "train": run_train,
    "quantize": run_quantize,
    "distill": run_distill,
    "attack": run_attack,
    "evaluate": run_evaluate,
    "experiment": run_experiment,
    "report": run_report,
}


def _fail(message, code):
    sys.stderr.write("error: %s\n" % " ".join(str(message).split()))
    return code


def main(argv=None):
    arguments = parse_arguments(argv)
    configure_logging(arguments.verbose, arguments.quiet)

    # Load config
    try:
        config = config_from_arguments(arguments)
    except ConfigError as e:
        return _fail(e, 2)
    error_messages = check_arguments(config)
    if error_messages:
        return _fail("; ".join(error_messages), 2)

    bdfa_tensor.set_precision(config.experiment_config.precision)
    try:
        RUNNERS[config.command](config)
    except (BdfaError, OSError) as e:
        return _fail("%s: %s" % (type(e).__name__, e), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
