"""Exception types shared across the package."""


class FKLabError(Exception):
    """Base class for all package errors."""


class InvalidInput(FKLabError):
    pass


class InvalidGrid(FKLabError):
    pass


class NonSuperlinearScaling(FKLabError):
    """The scale function grows too slowly for the envelope exponent to be finite."""


class UnsupportedRegime(FKLabError):
    pass


class InsufficientData(FKLabError):
    pass


class DegenerateEstimate(FKLabError):
    pass


class InvalidStep(FKLabError):
    pass


class UnsupportedDim(FKLabError):
    pass


class NoClosedForm(FKLabError):
    """No closed-form kernel for this process; callers should fall back to Monte Carlo."""


class BeyondHorizon(FKLabError):
    pass


class QuadratureFailure(FKLabError):
    pass


class UnboundedPotential(FKLabError):
    pass


class NonBrownianPath(FKLabError):
    pass


class DivergentPotential(FKLabError):
    pass


class RecurrentProcess(FKLabError):
    pass


class TailBiasTooLarge(FKLabError):
    pass


class BandwidthTooSmall(FKLabError):
    pass


class MeshTooCoarse(FKLabError):
    pass


class UnsupportedProcess(FKLabError):
    pass


class SingularPencil(FKLabError):
    pass


class ConfigError(FKLabError):
    pass
