#!/usr/bin/env python3
"""
Exception hierarchy for the Bayesian stress-testing toolkit.
Every library failure derives from BNStressError so the CLI can map it to exit code 1.
"""

from typing import Optional


class BNStressError(Exception):
    """Base class for domain errors"""


class GraphError(BNStressError):
    """Invalid network or unknown node"""


class DistributionError(BNStressError):
    """Invalid distribution parameters, type mismatch or degenerate fit"""


class ModelError(BNStressError):
    """Training or prediction failure of a model node"""


class InferenceError(BNStressError):
    """Exact enumeration or posterior sampling cannot proceed"""


class ScenarioError(BNStressError):
    """Scenario does not match the network it is applied to"""

    def __init__(self, message: str, pointer: Optional[str] = None):
        super().__init__(message)
        self.pointer = pointer

    def __str__(self) -> str:
        base = super().__str__()
        if self.pointer:
            return f"{base} (at {self.pointer})"
        return base


class DataError(BNStressError):
    """Input CSV does not match the expected schema"""

    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message)
        self.column = column


class MetricError(BNStressError):
    """Metric undefined for the given labels"""
