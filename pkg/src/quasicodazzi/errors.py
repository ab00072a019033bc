"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its stable numbering without a lookup table:

    1 usage, 2 parse/validate, 3 precondition, 4 tolerance, 5 numeric
"""

from __future__ import annotations


class QCError(Exception):
    exit_code = 5

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details


# parse / validate
class ParseError(QCError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}", line=line)
        self.line = line


class ValidationError(QCError):
    exit_code = 2


# preconditions
class PreconditionError(QCError):
    exit_code = 3


class StencilOutOfDomain(PreconditionError):
    pass


class DegenerateMetric(PreconditionError):
    def __init__(self, point, min_singular_value: float):
        super().__init__(
            f"metric degenerate at {list(map(float, point))} "
            f"(min singular value {min_singular_value:.3e})",
            point=point,
            min_singular_value=min_singular_value,
        )
        self.point = point
        self.min_singular_value = min_singular_value


class AsymmetricCubic(PreconditionError):
    pass


class NotDegenerateAtOrigin(PreconditionError):
    pass


class DegenerateOnOpenSet(PreconditionError):
    pass


class NotAContrastCandidate(PreconditionError):
    pass


class LagrangeViolated(PreconditionError):
    pass


class RankDeficientPhi(PreconditionError):
    pass


class UnequalEigenRanks(PreconditionError):
    pass


class SingularF(PreconditionError):
    pass


class NotFlat(PreconditionError):
    pass


class NonConstantPairing(PreconditionError):
    pass


class IntegrabilityViolated(PreconditionError):
    pass


class IllConditionedOverlap(PreconditionError):
    pass


# tolerance failures: the mathematics did not hold
class ToleranceFailure(QCError):
    exit_code = 4


class PathDependence(ToleranceFailure):
    pass


class NonConstantOffset(ToleranceFailure):
    pass


class EigenvalueTrackingAmbiguous(QCError):
    exit_code = 5


# numeric failures
class NonFiniteValue(QCError):
    exit_code = 5


class QuadratureFailure(QCError):
    exit_code = 5
