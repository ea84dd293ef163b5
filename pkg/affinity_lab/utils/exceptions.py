class AffinityLabError(Exception):
    """Base class for every error raised deliberately by affinity_lab."""


class LayoutError(AffinityLabError, ValueError):
    pass


class ConfigError(AffinityLabError, ValueError):
    pass


class RegistryError(AffinityLabError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep diagnostics on a single plain line.
        return str(self.args[0]) if self.args else ""


class TrainingDivergedError(AffinityLabError):
    def __init__(self, stage: str, epoch: int, loss: float, learning_rate: float):
        self.stage = stage
        self.epoch = epoch
        self.loss = loss
        self.learning_rate = learning_rate
        super().__init__(
            f"{stage} loss became non-finite ({loss}) at epoch {epoch}; "
            f"try a learning rate below {learning_rate:g}"
        )


class SamplingError(AffinityLabError):
    def __init__(self, step: int, t: float):
        self.step = step
        self.t = t
        super().__init__(f"non-finite coordinates at sampling step {step} (t={t:.4f})")


class CheckpointError(AffinityLabError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{reason}: {self.path}")
