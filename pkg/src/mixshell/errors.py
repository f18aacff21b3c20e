class ParameterError(ValueError):
    """A model or study parameter lies outside its admissible domain."""


class DimensionError(ValueError):
    """A state vector does not match the model dimension."""


class IntegrationError(RuntimeError):
    """Time integration stopped before reaching the final time.

    ``t_reached`` is the last accepted time; ``sample`` is the ensemble index
    when the failure happened inside an ensemble run.
    """

    def __init__(self, message, t_reached=None, sample=None):
        super().__init__(message)
        self.t_reached = t_reached
        self.sample = sample
