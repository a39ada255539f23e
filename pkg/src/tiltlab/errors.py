"""Exception types shared across the package."""


class TiltlabError(Exception):
    """Base class; ``code`` is the short tag printed by the CLI."""

    code = "tiltlab"


class BudgetExceeded(TiltlabError):
    code = "budget"


class ShapeMismatch(TiltlabError):
    code = "shape"


class EmptyInput(TiltlabError):
    code = "empty"


class SupportViolation(TiltlabError):
    code = "support"


class InvalidPath(TiltlabError):
    code = "invalid-path"


class ZeroProbability(TiltlabError):
    code = "zero-probability"


class ModelMismatch(TiltlabError):
    code = "model-mismatch"


class CorruptStream(TiltlabError):
    code = "corrupt-stream"


class AlphaOutOfRange(TiltlabError):
    code = "alpha"


class LambdaOutOfRange(TiltlabError):
    code = "lambda"


class DegenerateDirection(TiltlabError):
    code = "degenerate"


class NonpositiveTau(TiltlabError):
    code = "tau"


class NaNInput(TiltlabError):
    code = "nan"


class ConvergenceFailure(TiltlabError):
    code = "convergence"

    def __init__(self, message, best=None, gap=None):
        super().__init__(message)
        self.best = best
        self.gap = gap


class EmptyBatch(TiltlabError):
    code = "empty-batch"


class InfeasibleParams(TiltlabError):
    code = "infeasible"


class ConstantsMissing(TiltlabError):
    code = "constants-missing"


class FamilyMismatch(TiltlabError):
    code = "family-mismatch"


class InsufficientRuns(TiltlabError):
    code = "insufficient-runs"


class InfeasibleT(TiltlabError):
    code = "infeasible-t"


class NonpositiveInput(TiltlabError):
    code = "nonpositive"


class ConfigError(TiltlabError):
    code = "config"


class NumericalInconsistency(TiltlabError):
    """Two independent computation routes disagreed beyond tolerance."""

    code = "numerics"
