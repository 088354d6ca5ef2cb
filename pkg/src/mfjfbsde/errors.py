"""Exception hierarchy shared by all solver modules."""


class MFJError(Exception):
    """Base class for every error raised by the package."""


class NonPositiveHorizon(MFJError, ValueError):
    pass


class ZeroSteps(MFJError, ValueError):
    pass


class ShapeMismatch(MFJError, ValueError):
    pass


class NonFiniteState(MFJError, FloatingPointError):
    """A simulated or integrated state became NaN or infinite.

    The offending node index is stored in ``node`` when known.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class RankDeficientG(MFJError, ValueError):
    pass


class SingularRegression(MFJError, ArithmeticError):
    pass


class NonContracting(MFJError, RuntimeError):
    """Picard iteration failed to contract.

    ``ratios`` holds the observed successive-difference ratios and
    ``residuals`` the successive differences themselves.
    """

    def __init__(self, message, ratios=(), residuals=()):
        super().__init__(message)
        self.ratios = list(ratios)
        self.residuals = list(residuals)


class DegenerateRiccati(MFJError, ZeroDivisionError):
    pass


class FixedPointDiverged(MFJError, RuntimeError):
    pass


class ConfigParse(MFJError, ValueError):
    pass


class UnknownProblem(MFJError, KeyError):
    pass


class IoFailure(MFJError, OSError):
    pass


class SolveFailed(MFJError, RuntimeError):
    """A forward-backward solve ended without status ``Solved``; ``report`` holds the details."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
