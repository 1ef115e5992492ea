class EngineError(Exception):
    """Base class for all engine failures; carries the CLI exit code"""

    exit_code = 1


class ConfigError(EngineError, ValueError):
    """Run configuration is missing a section or holds an invalid value"""

    exit_code = 2


class SpecificationError(EngineError, ValueError):
    """A payoff, field or probe was specified inconsistently"""

    exit_code = 2


class CoefficientError(EngineError, ValueError):
    """A coefficient map returned a non-finite value"""

    exit_code = 3

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class ModelValidationError(EngineError, ValueError):
    """A sampled model condition (ellipticity, dividend sign) failed"""

    exit_code = 3


class UnsupportedModelError(EngineError, ValueError):
    """The requested construction does not support this model"""

    exit_code = 3


class PreconditionError(EngineError, ValueError):
    """An operation was called outside its declared preconditions"""

    exit_code = 3


class ProbeSpecificationError(PreconditionError):
    """A perturbation is indistinguishable from the reference field"""


class ExtrapolationError(EngineError, ValueError):
    """A surface query fell outside the grid's space-time box"""

    exit_code = 3


class SimulationError(EngineError, ArithmeticError):
    """A simulated state became non-finite"""

    exit_code = 3

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class SolverError(EngineError, ArithmeticError):
    """PSOR did not converge on a time layer"""

    exit_code = 3

    def __init__(self, message, layer=None, residual=None):
        super().__init__(message)
        self.layer = layer
        self.residual = residual


class TreeMismatchError(EngineError, ValueError):
    """Two processes were defined on different trees"""

    exit_code = 5


class DecompositionError(EngineError, ValueError):
    """Doob-Meyer decomposition was asked of a non-supermartingale"""

    exit_code = 5

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class OracleSizeError(EngineError, ValueError):
    """Brute-force stopping-time enumeration would explode"""

    exit_code = 5


class ThresholdBreach(EngineError):
    """A frozen acceptance threshold was not met"""

    exit_code = 4


class IdentityViolation(EngineError):
    """An exact tree identity failed; carries the witness"""

    exit_code = 5

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness
