"""Errors shared by the flow, optimization and harness layers.
"""

__all__ = (
    "FlowError",
    "DegenerateScheduler", "NumericalUnderflow", "NonFiniteState",
    "QuadratureUnresolved", "DimensionMismatch", "NonFiniteCost",
    "ZeroNorm", "LineSearchFailure", "BadMatrixFormat",
)


class FlowError(Exception):
    pass


class DegenerateScheduler(FlowError, ValueError):
    pass


class NumericalUnderflow(FlowError, ArithmeticError):
    pass


class NonFiniteState(FlowError, ArithmeticError):
    pass


class QuadratureUnresolved(FlowError, ArithmeticError):
    pass


class DimensionMismatch(FlowError, ValueError):
    pass


class NonFiniteCost(FlowError, ArithmeticError):
    pass


class ZeroNorm(FlowError, ValueError):
    pass


class LineSearchFailure(FlowError):
    pass


class BadMatrixFormat(FlowError, ValueError):
    pass
