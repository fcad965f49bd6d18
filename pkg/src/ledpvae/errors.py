"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line maps it to.
"""

from __future__ import annotations


class PvaeError(Exception):
    exit_code = 1


class ConfigError(PvaeError):
    """Invalid configuration; ``problems`` lists every violated invariant."""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(PvaeError):
    exit_code = 3


class ContainerFormatError(DataError):
    pass


class UnsupportedVersionError(ContainerFormatError):
    pass


class TruncatedContainerError(ContainerFormatError):
    pass


class NumericError(PvaeError):
    exit_code = 4


class ShapeError(ValueError):
    pass


class DegenerateTruthError(ValueError):
    pass
