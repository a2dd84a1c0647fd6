"""Exception hierarchy.

Three families map onto CLI exit codes: ``ValidationError`` (1) for bad
arguments and recipes, ``DataError`` (2) for malformed or mismatched data,
and ``StylevecIOError`` (3) for filesystem failures.
"""

from __future__ import annotations


class StylevecError(Exception):
    exit_code = 2


class ValidationError(StylevecError):
    exit_code = 1


class DataError(StylevecError):
    exit_code = 2


class StylevecIOError(StylevecError):
    exit_code = 3


# short name used in error listings
IoError = StylevecIOError


# tensor-core
class ShapeMismatch(DataError):
    pass


class DtypeMismatch(DataError):
    pass


class NonFiniteScale(ValidationError):
    pass


# checkpoint-io
class MalformedHeader(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


# task vectors
class KeySetMismatch(DataError):
    pass


class EmptyIntersection(DataError):
    pass


class KeyNotInBase(DataError):
    pass


class KeyNotFound(DataError):
    pass


class NonFiniteCoefficient(ValidationError):
    pass


class CoefficientOutOfRange(ValidationError):
    pass


# lora
class RankTooLarge(DataError):
    pass


class SvdNonConvergence(DataError):
    pass


# merge
class BlockIndexOutOfRange(DataError):
    pass


class TopologyMismatch(DataError):
    pass


class SchemaError(ValidationError):
    pass


class RoleViolation(ValidationError):
    pass


class MissingInput(StylevecIOError):
    pass


# analysis
class DegenerateTrajectory(DataError):
    pass
