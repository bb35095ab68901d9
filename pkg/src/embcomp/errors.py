"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not fit the requested operation."""


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the failing position."""

    def __init__(self, epoch: int, batch: int, learning_rate: float):
        self.epoch = epoch
        self.batch = batch
        self.learning_rate = learning_rate
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}, "
            f"learning rate {learning_rate}"
        )
