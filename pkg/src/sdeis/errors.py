"""Exception hierarchy shared across the package."""


class SdeisError(Exception):
    """Base class for all errors raised by this package."""


class NonFiniteModelOutput(SdeisError):
    def __init__(self, what, state):
        self.state = state
        super().__init__(f"non-finite {what} at state {state!r}")


class NonFiniteCost(SdeisError):
    pass


class UnknownModel(SdeisError):
    pass


class InvalidParam(SdeisError):
    def __init__(self, key, message=""):
        self.key = key
        super().__init__(f"invalid parameter {key!r}" + (f": {message}" if message else ""))


class NotPositiveDefinite(SdeisError):
    def __init__(self, block):
        self.block = block
        super().__init__(f"matrix is not positive definite (block {block})")


class MaxItersExceeded(SdeisError):
    def __init__(self, best, grad_norm, iterations):
        self.best = best
        self.grad_norm = grad_norm
        self.iterations = iterations
        super().__init__(
            f"Newton did not converge in {iterations} iterations (|grad|_inf={grad_norm:.3e})"
        )


class SampleFailed(SdeisError):
    pass


class EnsembleFailed(SdeisError):
    def __init__(self, ensemble, message):
        self.ensemble = ensemble
        super().__init__(message)


class EmptyEnsemble(SdeisError):
    pass


class OutOfRangeStep(SdeisError):
    pass


class NonPositiveValue(SdeisError):
    pass


class ModelNotSupported(SdeisError):
    pass


class ConfigError(SdeisError):
    pass
