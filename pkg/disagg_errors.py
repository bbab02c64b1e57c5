"""
Exceptions shared by the disaggregation modules.

Each error carries the process exit code the CLI returns for it.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4


class DisaggError(Exception):
    """Base class; `exit_code` is what hvac_disagg.py exits with."""

    exit_code = 1


class ConfigError(DisaggError):
    exit_code = EXIT_CONFIG


class DataError(DisaggError, ValueError):
    exit_code = EXIT_DATA


class SolverDivergence(DataError):
    """Fine-tuning produced a non-finite objective."""

    def __init__(self, iteration: int, value: float) -> None:
        super().__init__(f"fine-tune diverged at iteration {iteration} (objective={value})")
        self.iteration = iteration
        self.value = value

    def __reduce__(self):
        return type(self), (self.iteration, self.value)
