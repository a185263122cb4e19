#!/usr/bin/env python
# -*- coding: utf-8 -*-


class BdfaError(Exception):
    """Base class for every failure the toolkit reports by name."""


class ShapeError(BdfaError):
    pass


class NonFiniteError(BdfaError):
    pass


class BackwardError(BdfaError):
    pass


class ConfigError(BdfaError):
    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class FormatError(BdfaError):
    pass


class VersionError(BdfaError):
    pass


class TruncatedError(BdfaError):
    pass


class ChecksumError(BdfaError):
    pass


class ConsistencyError(BdfaError):
    pass


class BNStatsUnavailableError(BdfaError):
    pass


class DivergenceError(BdfaError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class AttackStalledError(BdfaError):
    pass


class DatasetError(BdfaError):
    pass


class ReportError(BdfaError):
    pass


class QuantizationError(BdfaError):
    pass
