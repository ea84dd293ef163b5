"""
Fixed lookup tables of the toy world. They were generated once from a fixed seed and are
committed as plain-text matrices so every machine sees the same world.
"""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from affinity_lab.world.sequences import NUM_RESIDUE_TYPES

TABLES_DIR = Path(__file__).parent / "tables"
TABLE_FILES = {
    "angles": "angles.txt",
    "interaction": "interaction.txt",
    "markov_initial": "markov_initial.txt",
    "markov_transition": "markov_transition.txt",
}


def read_table(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    with open(path, "r") as f:
        header = f.readline().split()
    if len(header) != 4 or header[:2] != ["#", "shape"]:
        raise ValueError(f"{path} lacks a '# shape <rows> <cols>' header")
    shape = (int(header[2]), int(header[3]))
    values = np.loadtxt(path, comments="#", ndmin=2, dtype=np.float64)
    if values.shape != shape:
        raise ValueError(f"{path} declares shape {shape} but holds {values.shape}")
    return values


def write_table(path: Union[str, Path], values: np.ndarray):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    np.savetxt(
        path,
        values,
        fmt="%.17g",
        header=f"shape {values.shape[0]} {values.shape[1]}",
        comments="# ",
    )


@dataclass(frozen=True)
class WorldTables:
    angles: torch.Tensor  # (20, 2): bend, torsion in radians
    interaction: torch.Tensor  # (20, 20) symmetric
    markov_initial: torch.Tensor  # (20,)
    markov_transition: torch.Tensor  # (20, 20), rows sum to 1

    def __post_init__(self):
        n = NUM_RESIDUE_TYPES
        if tuple(self.angles.shape) != (n, 2):
            raise ValueError(f"angle table must be {n}x2")
        if tuple(self.interaction.shape) != (n, n):
            raise ValueError(f"interaction table must be {n}x{n}")
        if not torch.equal(self.interaction, self.interaction.T):
            raise ValueError("interaction table must be symmetric")
        if tuple(self.markov_transition.shape) != (n, n):
            raise ValueError(f"markov transition table must be {n}x{n}")

    @classmethod
    def from_arrays(cls, angles, interaction, markov_initial, markov_transition):
        initial = torch.as_tensor(markov_initial, dtype=torch.float64).reshape(-1)
        transition = torch.as_tensor(markov_transition, dtype=torch.float64)
        return cls(
            angles=torch.as_tensor(angles, dtype=torch.float64),
            interaction=torch.as_tensor(interaction, dtype=torch.float64),
            markov_initial=initial / initial.sum(),
            markov_transition=transition / transition.sum(dim=1, keepdim=True),
        )

    def replace(self, **changes) -> "WorldTables":
        fields = dict(
            angles=self.angles,
            interaction=self.interaction,
            markov_initial=self.markov_initial,
            markov_transition=self.markov_transition,
        )
        fields.update(changes)
        return WorldTables.from_arrays(**fields)

    def save(self, directory: Union[str, Path]):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, filename in TABLE_FILES.items():
            write_table(directory / filename, getattr(self, name).numpy())


@lru_cache(maxsize=8)
def _load(directory: str) -> WorldTables:
    directory = Path(directory)
    arrays = {name: read_table(directory / filename) for name, filename in TABLE_FILES.items()}
    return WorldTables.from_arrays(**arrays)


def load_tables(directory: Optional[Union[str, Path]] = None) -> WorldTables:
    return _load(str(Path(directory or TABLES_DIR).resolve()))
