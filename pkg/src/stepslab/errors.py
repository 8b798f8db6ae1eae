"""Exception types shared across modules (tensor-level errors live in ``tensor``)."""


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class PreconditionError(RuntimeError):
    """An operation was invoked before what it depends on exists."""


class CheckpointError(ValueError):
    """A checkpoint is malformed or incompatible with the requested use."""


class DegenerateInputError(ArithmeticError):
    """A statistic needed as a denominator is zero."""


class TrainingDivergence(RuntimeError):
    """The loss became non-finite during training."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"training diverged at step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
