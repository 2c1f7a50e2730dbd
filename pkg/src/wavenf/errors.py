"""Exception hierarchy shared across the package."""


class WavenfError(Exception):
    """Base class for all package errors."""


class DimensionError(WavenfError):
    """Operands or arguments have incompatible (n, J) shapes."""


class CapError(WavenfError):
    """A requested construction exceeds the algebra's degree or Fourier cap."""


class NonNilpotentGenerator(WavenfError):
    """A Lie-transform generator contains weighted-degree <= 2 terms, so the
    graded series would not terminate at the degree cap."""


class ConvergenceError(WavenfError):
    """An iterative procedure failed to reach its residual target."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ResonantTerm(WavenfError):
    """A small divisor fell below the gate threshold.

    Carries the offending query data so the caller can skip the term or
    reject the parameter point.
    """

    def __init__(self, message, k=None, l_tilde=None, l_hat=None,
                 divisor=None, threshold=None):
        super().__init__(message)
        self.k = k
        self.l_tilde = l_tilde
        self.l_hat = l_hat
        self.divisor = divisor
        self.threshold = threshold

    def query_info(self):
        return {
            "k": list(self.k) if self.k is not None else None,
            "l_tilde": list(self.l_tilde) if self.l_tilde is not None else None,
            "l_hat": [list(p) for p in self.l_hat] if self.l_hat is not None else None,
            "divisor": self.divisor,
            "threshold": self.threshold,
        }


class Order2Resonance(ResonantTerm):
    """A resonance at the quadratic normalization stage: the parameter point
    must be rejected."""


class ParameterDomainError(WavenfError):
    """A parameter vector lies outside the admissible box."""


class FlowError(WavenfError):
    """Numerical integration of a generating flow failed."""


class BlowupError(WavenfError):
    """The wave integrator produced a non-finite state."""

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class ConfigError(WavenfError):
    """A run configuration failed validation; carries the offending field path."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
