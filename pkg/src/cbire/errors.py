"""Exception hierarchy shared by all modules."""


class CBIREError(Exception):
    """Base class for every error raised by the package."""


class DomainError(CBIREError, ValueError):
    """An argument lies outside the domain of an operation."""


class AdmissibilityError(CBIREError):
    """Model data violate an integrability or structural requirement."""


class NumericalError(CBIREError):
    """A quadrature or root search failed to converge."""


class UnsupportedCouplingError(CBIREError):
    """The refined coupling needs a density part the measure does not have."""


class InstabilityError(CBIREError):
    """A simulated state exceeded the overflow guard.

    ``prefix`` carries whatever part of the trajectory was produced before the
    blow-up (a :class:`~cbire.simulate.SamplePath` or ``None``).
    """

    def __init__(self, message, prefix=None):
        super().__init__(message)
        self.prefix = prefix


class ConditionError(CBIREError):
    """A sufficient condition for ergodicity could not be established.

    ``condition`` is one of ``"immigration"``, ``"lyapunov"``,
    ``"nontriviality"``, ``"negative_jump_tail"`` or a pipeline stage name
    such as ``"small_state_drift"``.
    """

    def __init__(self, condition, message):
        super().__init__(f"[{condition}] {message}")
        self.condition = condition
