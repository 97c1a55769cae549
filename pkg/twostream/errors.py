#!/usr/bin/env python3

"""
Exception hierarchy shared by every twostream module.

The CLI maps these onto exit codes, see twostream.__main__.
"""


class TwoStreamError(Exception):
    """Base class for all errors raised by twostream."""

    exit_code = 2


class ContractError(TwoStreamError, ValueError):
    """A precondition or invariant of an operation was violated."""

    exit_code = 2


class DimensionError(ContractError):
    """Tensor extents do not line up for the requested operation."""


class TokenIndexError(ContractError, IndexError):
    """An id does not address a row of the table it is looked up in."""


class ParseError(ContractError):
    """A dataset, config or checkpoint record could not be parsed."""


class IntegrityError(ContractError):
    """Stored bytes do not match their recorded checksum."""


class VersionMismatchError(ContractError):
    """A stored artifact was written by an incompatible format version."""

    def __init__(self, what: str, found: object, expected: object) -> None:
        self.found = found
        self.expected = expected
        super().__init__(f"{what} format version {found} is not supported (expected version {expected})")


class UsageError(TwoStreamError):
    """Bad command-line usage: unknown task, missing inputs, refused overwrite."""

    exit_code = 1


class NumericalError(TwoStreamError, ArithmeticError):
    """Non-finite values, divergence, or a failed gradient check."""

    exit_code = 3
