from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, StrictFloat, confloat, conint


class EpochProgress(BaseModel):
    stage: str
    epoch: conint(ge=0, strict=True)
    mean_loss: StrictFloat
    learning_rate: confloat(gt=0.0)
    num_batches: conint(ge=0, strict=True)


@dataclass
class LossCurve:
    stage: str
    losses: List[float] = field(default_factory=list)

    def update(self, progress: EpochProgress):
        self.losses.append(progress.mean_loss)

    def __len__(self):
        return len(self.losses)

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]

    def moving_average(self, window: int = 5) -> np.ndarray:
        values = np.asarray(self.losses, dtype=np.float64)
        if len(values) < window:
            return values
        return np.convolve(values, np.ones(window) / window, mode="valid")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": range(len(self.losses)), "mean_loss": self.losses})

    def save(self, directory: Union[str, Path]) -> Path:
        # Local import: data.dataset imports the world package, which imports utils.
        from affinity_lab.data.dataset import write_csv

        path = Path(directory) / f"{self.stage}_loss.csv"
        write_csv(self.to_frame(), path)
        return path
