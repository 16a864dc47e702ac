"""Exception types shared across the package.

Each carries a short machine-readable ``code`` so the CLI can emit a JSON
error record without string matching.
"""
from __future__ import annotations


class CZPError(Exception):
    code = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    def to_dict(self) -> dict:
        out = {"error": self.code, "message": str(self)}
        out.update({k: _jsonable(v) for k, v in self.context.items()})
        return out


def _jsonable(v):
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "tolist"):
        return _jsonable(v.tolist())
    return v


class InvalidArgument(CZPError, ValueError):
    code = "invalid-argument"


class CapacityError(CZPError, ValueError):
    code = "capacity"


class InstabilityError(CZPError, ArithmeticError):
    code = "instability"


class NotDiagonalizable(CZPError, ArithmeticError):
    code = "not-diagonalizable"


class NonDecayingMode(CZPError, ArithmeticError):
    code = "non-decaying-mode"


class DegenerateDenominator(CZPError, ArithmeticError):
    code = "degenerate-denominator"


class IllConditioned(CZPError, ArithmeticError):
    code = "ill-conditioned"


class SingularPole(CZPError, ArithmeticError):
    code = "singular-pole"


class DegenerateImpedance(CZPError, ArithmeticError):
    code = "degenerate-impedance"


class FitFailure(CZPError, RuntimeError):
    code = "fit-failure"


class NumericError(CZPError, ArithmeticError):
    code = "numeric"


class InvalidState(CZPError, RuntimeError):
    code = "invalid-state"


class OracleError(CZPError, RuntimeError):
    code = "oracle"
