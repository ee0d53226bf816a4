"""Exception types carrying the fixed error vocabulary used by the CLI."""


class LatentUpdateError(Exception):
    code = "VALIDATION"


class ValidationError(LatentUpdateError, ValueError):
    code = "VALIDATION"


class StaleCacheError(LatentUpdateError):
    code = "STALE_CACHE"


class DegenerateWeightsError(LatentUpdateError, FloatingPointError):
    code = "DEGENERATE_WEIGHTS"


class CappedESSError(LatentUpdateError):
    code = "CAPPED_ESS"


class PrecisionError(LatentUpdateError, ArithmeticError):
    """Raised when a quadrature refinement check fails."""

    code = "PRECISION"


class SamplerError(LatentUpdateError, FloatingPointError):
    """A Gibbs/Metropolis update produced a non-finite value."""

    code = "SAMPLER"

    def __init__(self, parameter, iteration, chain=None):
        self.parameter = parameter
        self.iteration = iteration
        self.chain = chain
        where = f"iteration {iteration}" if chain is None else f"chain {chain}, iteration {iteration}"
        super().__init__(f"non-finite value for {parameter!r} at {where}")
