#!/usr/bin/env python3
"""
Exception hierarchy for multiloc.

Each family carries the process exit code the CLI reports for it. Code 2
belongs to argparse usage errors and is never used here.
"""

from typing import List, Optional, Tuple


class MultilocError(Exception):
    """Base class for all package errors"""
    exit_code = 1


class InvalidInputError(MultilocError, ValueError):
    """Input violates a documented precondition"""
    exit_code = 9


class DegenerateDescriptorError(InvalidInputError):
    """Descriptor cannot be normalized (zero norm)"""


class ConfigError(InvalidInputError):
    """Malformed configuration file or override"""
    exit_code = 10


class NotFoundError(MultilocError, LookupError):
    """Referenced id does not exist"""
    exit_code = 11

    def __str__(self):
        # LookupError would quote the message
        return str(self.args[0]) if self.args else ''


class WorldGenerationError(MultilocError):
    """Synthetic world cannot be generated with the given constraints"""
    exit_code = 3


class FormatError(MultilocError):
    """Bad magic, version or structure in a file"""
    exit_code = 4


class CorruptionError(FormatError):
    """Payload shorter or longer than the header promises"""

    def __init__(self, message: str, expected_bytes: int, actual_bytes: int,
                 offset: Optional[int] = None):
        super().__init__(message)
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes
        self.offset = offset


class IngestionError(FormatError):
    """One or more records failed validation"""

    def __init__(self, message: str, problems: Optional[List[Tuple[int, str]]] = None):
        self.problems = list(problems or [])
        if self.problems:
            details = '; '.join(f"line {line}: {text}" for line, text in self.problems[:10])
            message = f"{message} ({details})"
        super().__init__(message)


class SamplerError(MultilocError):
    """Batch construction failed"""
    exit_code = 5


class InsufficientMembersError(SamplerError):
    """A cell or class lacks enough qualifying images"""


class InsufficientClassesError(SamplerError):
    """Not enough eligible classes for a sub-batch"""


class InfeasibleSceneError(SamplerError):
    """No quadruplet satisfying the overlap constraint exists in a scene"""


class CompositionError(SamplerError):
    """Wrong multiset of sub-batch sources for an iteration"""


class TrainingDivergenceError(MultilocError):
    """Non-finite gradient or parameter during training"""
    exit_code = 6

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class BudgetInfeasibleError(MultilocError):
    """Memory budget cannot hold a single block"""
    exit_code = 7

    def __init__(self, message: str, minimum_bytes: int):
        super().__init__(f"{message} (minimum {minimum_bytes} bytes)")
        self.minimum_bytes = minimum_bytes


class UndefinedMetricError(MultilocError):
    """Metric has no evaluable query"""
    exit_code = 8


# families with their own exit code, in code order
EXIT_CODE_FAMILIES = (
    WorldGenerationError,
    FormatError,
    SamplerError,
    TrainingDivergenceError,
    BudgetInfeasibleError,
    UndefinedMetricError,
    InvalidInputError,
    ConfigError,
    NotFoundError,
)


def exit_code_help() -> str:
    """Exit code table for the CLI help"""
    lines = ['exit codes:',
             '  0   success',
             '  1   unexpected error',
             '  2   invalid command line']
    lines += [f"  {cls.exit_code:<3} {cls.__name__}: {cls.__doc__}" for cls in EXIT_CODE_FAMILIES]
    return '\n'.join(lines)
