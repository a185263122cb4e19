#!/usr/bin/env python
# -*- coding: utf-8 -*-

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from bdfa_errors import ConfigError

ATTACK_MODES = ["bdfa", "bfa", "noise", "random"]
DATASET_NAMES = ["blobs4", "rings2", "cifar10", "cifar100"]
LR_SCHEDULES = ["constant", "cosine", "step"]
PRECISIONS = ["float32", "float64"]


class _ConfigSection:
    section = None

    def __init__(self):
        self.unknown_keys = []

    def fields(self):
        return {key: value for key, value in vars(self).items() if key != "unknown_keys"}

    def update(self, values: dict):
        # Unknown keys are kept so check_valid can name them.
        known = self.fields()
        for key, value in values.items():
            if key in known:
                setattr(self, key, tuple(value) if isinstance(known[key], tuple) else value)
            else:
                self.unknown_keys.append("%s.%s" % (self.section, key))
        return self

    def reset(self):
        self.__dict__.update(type(self)().__dict__)

    def check_valid(self):
        return ["Unknown setting %s" % key for key in self.unknown_keys]

    def __str__(self):
        lines = ["%s:" % type(self).__name__]
        lines += ["-%s: %s" % (key, value) for key, value in self.fields().items()]
        return "\n".join(lines)


class DatasetConfig(_ConfigSection):
    section = "dataset"

    def __init__(self):
        """
        Attributes:
            name (str): blobs4 / rings2 (generated) or cifar10 / cifar100 (loaded from path).
            num_samples (int): generated samples before the train/test split.
            test_fraction (float): share of generated samples tagged test.
            path (str): directory holding the CIFAR binary files.
            seed (int): generator seed; experiments override it per seed.
        """
        super().__init__()
        self.name = "blobs4"
        self.num_samples = 1000
        self.test_fraction = 0.2
        self.path = None
        self.seed = 0

    def check_valid(self):
        error_messages = super().check_valid()
        if self.name not in DATASET_NAMES:
            error_messages.append("dataset name must be one of %s" % DATASET_NAMES)
        if self.name.startswith("cifar") and not self.path:
            error_messages.append("CIFAR datasets need dataset.path")
        if not self.num_samples >= 8:
            error_messages.append("dataset.num_samples must be at least 8")
        if not 0 < self.test_fraction < 1:
            error_messages.append("dataset.test_fraction must be between 0 and 1")
        return error_messages


class ModelConfig(_ConfigSection):
    section = "model"

    def __init__(self):
        """
        Attributes:
            arch (str): plain (two conv-BN blocks) or residual (adds a skip around the second block).
            width (int): channels of both conv layers.
            bn_momentum (float): running statistics momentum used while training.
        """
        super().__init__()
        self.arch = "residual"
        self.width = 8
        self.bn_momentum = 0.1

    def check_valid(self):
        error_messages = super().check_valid()
        if self.arch not in ("plain", "residual"):
            error_messages.append("model.arch must be plain or residual")
        if not self.width >= 1:
            error_messages.append("model.width must be positive")
        if not 0 < self.bn_momentum <= 1:
            error_messages.append("model.bn_momentum must be in (0, 1]")
        return error_messages


class TrainConfig(_ConfigSection):
    section = "train"

    def __init__(self):
        """
        Attributes:
            epochs (int): passes over the train split.
            batch_size (int): SGD mini-batch size.
            learning_rate (float): initial step size; 0 leaves parameters untouched.
            lr_schedule (str): constant, cosine (anneal to 0) or step (x0.1 at half the epochs).
            momentum (float): SGD momentum.
            weight_decay (float): L2 penalty.
            seed (int): init and shuffling seed.
        """
        super().__init__()
        self.epochs = 10
        self.batch_size = 32
        self.learning_rate = 0.05
        self.lr_schedule = "cosine"
        self.momentum = 0.9
        self.weight_decay = 5e-4
        self.seed = 0

    def check_valid(self):
        error_messages = super().check_valid()
        if not self.epochs >= 1:
            error_messages.append("train.epochs must be positive")
        if not self.batch_size >= 1:
            error_messages.append("train.batch_size must be positive")
        if not self.learning_rate >= 0:
            error_messages.append("train.learning_rate must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            error_messages.append("train.lr_schedule must be one of %s" % LR_SCHEDULES)
        if not 0 <= self.momentum < 1:
            error_messages.append("train.momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            error_messages.append("train.weight_decay must be non-negative")
        return error_messages


class QuantConfig(_ConfigSection):
    section = "quantize"

    def __init__(self):
        """
        Attributes:
            bits (int): code width q of every conv/linear weight.
        """
        super().__init__()
        self.bits = 8

    def check_valid(self):
        error_messages = super().check_valid()
        if not 2 <= self.bits <= 8:
            error_messages.append("quantize.bits must be between 2 and 8")
        return error_messages


class DistillConfig(_ConfigSection):
    section = "distill"

    def __init__(self):
        """
        Attributes:
            batch_size (int): synthetic samples N.
            iterations (int): optimizer steps on X.
            alpha (float): weight of the BN statistics loss.
            beta (float): weight of the random-label classification loss.
            learning_rate (float): Adam step size on X.
            betas (tuple): Adam first/second moment decay.
            seed (int): seed of the initial batch and labels.
        """
        super().__init__()
        self.batch_size = 128
        self.iterations = 500
        self.alpha = 1.0
        self.beta = 1.0
        self.learning_rate = 0.01
        self.betas = (0.9, 0.999)
        self.seed = 0

    def check_valid(self):
        error_messages = super().check_valid()
        if not self.batch_size >= 1:
            error_messages.append("distill.batch_size must be at least 1")
        if not self.iterations >= 1:
            error_messages.append("distill.iterations must be at least 1")
        if self.alpha < 0 or self.beta < 0:
            error_messages.append("distill.alpha and distill.beta must be non-negative")
        elif not self.alpha + self.beta > 0:
            error_messages.append("distill.alpha + distill.beta must be positive")
        if not self.learning_rate > 0:
            error_messages.append("distill.learning_rate must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            error_messages.append("distill.betas must be two values in [0, 1)")
        return error_messages


class AttackConfig(_ConfigSection):
    section = "attack"

    def __init__(self):
        """
        Attributes:
            mode (str): bdfa (distilled batch), bfa (real batch), noise (undistilled random batch)
                or random (random flips).
            max_flips (int): Hamming budget C.
            candidates_per_layer (int): k, gradient-ranked candidates evaluated per layer.
            accuracy_floor (float): stop once evaluation accuracy is at or below this value; None disables.
            direction_filter (bool): only consider flips whose estimated loss change is positive.
            batch_size (int): real-batch size for bfa mode.
            seed (int): batch sampling and random-flip seed.
        """
        super().__init__()
        self.mode = "bdfa"
        self.max_flips = 30
        self.candidates_per_layer = 1
        self.accuracy_floor = None
        self.direction_filter = True
        self.batch_size = 128
        self.seed = 0

    def check_valid(self):
        error_messages = super().check_valid()
        if self.mode not in ATTACK_MODES:
            error_messages.append("attack.mode must be one of %s" % ATTACK_MODES)
        if not (isinstance(self.max_flips, int) and self.max_flips >= 1):
            error_messages.append("attack.max_flips must be at least 1")
        if not self.candidates_per_layer >= 1:
            error_messages.append("attack.candidates_per_layer must be at least 1")
        if self.accuracy_floor is not None and not 0 <= self.accuracy_floor <= 1:
            error_messages.append("attack.accuracy_floor must be between 0 and 1")
        if not self.batch_size >= 1:
            error_messages.append("attack.batch_size must be at least 1")
        return error_messages


class ExperimentConfig(_ConfigSection):
    section = "experiment"

    def __init__(self):
        """
        Attributes:
            name (str): label used in reports.
            seeds (list): one full train/quantize/distill/attack run per seed.
            modes (list): attack modes run against every victim.
            output_folder (str): experiment directory.
            threshold (float): accuracy level used for flips-to-threshold.
            workers (int): seeds run in a process pool when above 1.
            precision (str): float32 for runs, float64 for gradient checks.
            progress (bool): draw tqdm progress bars.
        """
        super().__init__()
        self.name = "desk-scale"
        self.seeds = [0, 1, 2, 3, 4]
        self.modes = ["bdfa", "bfa"]
        self.output_folder = None
        self.threshold = 0.375
        self.workers = 1
        self.precision = "float32"
        self.progress = True
        self.dataset = DatasetConfig()
        self.model = ModelConfig()
        self.train = TrainConfig()
        self.quantize = QuantConfig()
        self.distill = DistillConfig()
        self.attack = AttackConfig()

    def sections(self):
        return [self.dataset, self.model, self.train, self.quantize, self.distill, self.attack]

    def fields(self):
        return {key: value for key, value in super().fields().items() if not isinstance(value, _ConfigSection)}

    def check_valid(self):
        error_messages = super().check_valid()
        if not self.seeds:
            error_messages.append("experiment.seeds must list at least one seed")
        for mode in self.modes:
            if mode not in ATTACK_MODES:
                error_messages.append("experiment.modes entry %r must be one of %s" % (mode, ATTACK_MODES))
        if not self.output_folder:
            error_messages.append("You must choose an output folder")
        if not 0 <= self.threshold <= 1:
            error_messages.append("experiment.threshold must be between 0 and 1")
        if not self.workers >= 1:
            error_messages.append("experiment.workers must be at least 1")
        if self.precision not in PRECISIONS:
            error_messages.append("experiment.precision must be one of %s" % PRECISIONS)
        for section in self.sections():
            error_messages += section.check_valid()
        return error_messages

    def apply(self, document: dict):
        by_name = {section.section: section for section in self.sections()}
        for name, values in document.items():
            if name == self.section:
                self.update(values)
            elif name in by_name and isinstance(values, dict):
                by_name[name].update(values)
            else:
                self.unknown_keys.append(name)
        return self

    @classmethod
    def from_toml(cls, path: str):
        try:
            with open(path, "rb") as config_file:
                document = tomllib.load(config_file)
        except FileNotFoundError:
            raise ConfigError("config file %s not found" % path)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("config file %s is not valid TOML: %s" % (path, e))
        return cls().apply(document)

    def to_dict(self):
        document = {self.section: dict(self.fields())}
        for section in self.sections():
            document[section.section] = dict(section.fields())
        return document

    def __str__(self):
        return "\n".join([super().__str__()] + [str(section) for section in self.sections()])
