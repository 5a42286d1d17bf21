"""Exception types shared across the package."""


class CrystalError(Exception):
    pass


class DimensionError(CrystalError, ValueError):
    """Shapes or extents do not line up."""


class ContractError(CrystalError, ValueError):
    """A precondition of an operation was violated."""


class VocabularyError(CrystalError, KeyError):
    pass


class TrainingDiverged(CrystalError, RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, step: int, batch_seed: int, breakdown: dict):
        self.step = step
        self.batch_seed = batch_seed
        self.breakdown = breakdown
        super().__init__(
            f"non-finite loss at step {step} (batch seed {batch_seed}): {breakdown}"
        )
