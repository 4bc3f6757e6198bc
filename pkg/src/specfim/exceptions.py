"""Exception hierarchy.

The CLI maps ``ConfigError`` to exit code 2 and every ``NumericFailure``
to exit code 3.
"""


class SpecfimError(Exception):
    """Base class for all package errors."""


class ConfigError(SpecfimError, ValueError):
    """Invalid user input: malformed files, bad parameters, mismatched shapes."""


class ModelError(ConfigError):
    """A transfer function is non-monic, improper, unstable or degenerate."""


class NumericFailure(SpecfimError, RuntimeError):
    """A numerical routine failed to converge or produced an invalid result."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class AssemblyError(NumericFailure):
    """An assembled Gram matrix is not positive definite."""


class CriterionInfeasible(NumericFailure):
    """No point with a nonsingular information matrix exists for this y."""


class DesignFailure(NumericFailure):
    """The lower-bound search could not produce a feasible design."""


class SynthesisError(NumericFailure):
    """Synthesized signals violate the realness check."""


class EstimationError(NumericFailure):
    """Parameter estimation hit an ill-conditioned regression."""
