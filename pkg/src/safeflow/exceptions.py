"""Exception hierarchy.

Errors are grouped by what they mean for a run so the CLI can map them
onto exit codes: configuration problems, model-contract violations
(an assumption of the method does not hold) and numerical failures.
"""


class SafeflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SafeflowError, ValueError):
    """Malformed scenario or inconsistent dimensions."""


class DimensionError(ConfigurationError):
    pass


class ContractViolation(SafeflowError):
    """A modelling assumption is violated at the point of evaluation."""


class Infeasible(ContractViolation):
    """No point satisfies the QP constraints."""


class InitialInputInfeasible(ContractViolation):
    pass


class NotNegativeDefinite(ContractViolation):
    pass


class LicqViolated(ContractViolation):
    pass


class NotHurwitz(ContractViolation):
    pass


class StrictComplementarityViolated(ContractViolation):
    """An active constraint has a zero multiplier; reported rather than raised."""


class EtaOutOfRange(ContractViolation):
    """The gain is outside the range the stability certificate covers."""


class NumericalFailure(SafeflowError):
    """Iteration limits, singular systems, NaN/Inf in a trajectory."""


class MaxIterations(NumericalFailure):
    pass


class IllConditioned(NumericalFailure):
    pass


class NoConvergence(NumericalFailure):
    pass


class SingularLyapunovSystem(NumericalFailure):
    pass


class SimulationError(NumericalFailure):
    def __init__(self, message, time=None):
        super().__init__(message if time is None else f"t={time:.6g}: {message}")
        self.time = time


class InvalidS(SafeflowError, ValueError):
    pass


class MissingErrorChannel(SafeflowError, ValueError):
    pass


class EmptySampleSet(SafeflowError, ValueError):
    pass
