# The MIT License (MIT)
# Copyright © 2024 affinity_lab developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd
import torch
from loguru import logger

from affinity_lab.protocol import EnergyRecord, LabeledPair
from affinity_lab.utils.config import NoiseConfig, WorldConfig
from affinity_lab.utils.exceptions import CheckpointError, RegistryError
from affinity_lab.utils.misc import make_generator
from affinity_lab.world.oracle import (
    DTYPE,
    apply_noise,
    fold_batch,
    oracle_binding_energies,
    oracle_ensemble_sample,
    smooth_noise,
)
from affinity_lab.world.sequences import ALPHABET, ComplexLayout, Sequence, make_complex
from affinity_lab.world.tables import WorldTables, load_tables

FLOAT_FORMAT = "%.17g"


def write_csv(frame: pd.DataFrame, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_csv(path: Union[str, Path], **kwargs) -> pd.DataFrame:
    """Inverse of write_csv; floats parse back to the exact value written."""
    return pd.read_csv(path, float_precision="round_trip", **kwargs)


@dataclass(frozen=True)
class Registry:
    """Id -> sequence lookup for the antibodies and antigens of one dataset."""

    antibodies: Tuple[Sequence, ...]
    antigens: Tuple[Sequence, ...]

    @property
    def num_antibodies(self) -> int:
        return len(self.antibodies)

    @property
    def num_antigens(self) -> int:
        return len(self.antigens)

    def antibody(self, antibody_id: int) -> Sequence:
        if not 0 <= antibody_id < len(self.antibodies):
            raise RegistryError(f"unknown antibody id {antibody_id}")
        return self.antibodies[antibody_id]

    def antigen(self, antigen_id: int) -> Sequence:
        if not 0 <= antigen_id < len(self.antigens):
            raise RegistryError(f"unknown antigen id {antigen_id}")
        return self.antigens[antigen_id]

    def wildtype_id(self, antigen_id: int) -> int:
        self.antigen(antigen_id)
        return antigen_id % len(self.antibodies)

    def wildtype(self, antigen_id: int) -> Sequence:
        return self.antibodies[self.wildtype_id(antigen_id)]

    def to_frame(self) -> pd.DataFrame:
        rows = [(i, "antibody", str(s)) for i, s in enumerate(self.antibodies)]
        rows += [(i, "antigen", str(s)) for i, s in enumerate(self.antigens)]
        return pd.DataFrame(rows, columns=["id", "role", "sequence"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "Registry":
        def by_role(role):
            part = frame[frame["role"] == role].sort_values("id")
            if list(part["id"]) != list(range(len(part))):
                raise RegistryError(f"{role} ids in registry are not contiguous from 0")
            return tuple(Sequence(s) for s in part["sequence"])

        return cls(antibodies=by_role("antibody"), antigens=by_role("antigen"))


@dataclass
class ToyDataset:
    registry: Registry
    records: List[EnergyRecord]
    labels: List[LabeledPair]
    world: WorldConfig
    noise: NoiseConfig
    docking_seed: int
    num_heldout: int
    tables: WorldTables = field(default_factory=load_tables)

    def __post_init__(self):
        self._by_pair: Dict[Tuple[int, int], EnergyRecord] = {
            (r.antigen_id, r.antibody_id): r for r in self.records
        }

    @property
    def training_antigens(self) -> List[int]:
        return list(range(self.registry.num_antigens - self.num_heldout))

    @property
    def heldout_antigens(self) -> List[int]:
        return list(range(self.registry.num_antigens - self.num_heldout, self.registry.num_antigens))

    def record(self, antigen_id: int, antibody_id: int) -> EnergyRecord:
        try:
            return self._by_pair[(antigen_id, antibody_id)]
        except KeyError:
            raise RegistryError(f"no energy record for antigen {antigen_id}, antibody {antibody_id}")

    def records_for(self, antigen_id: int) -> List[EnergyRecord]:
        return [r for r in self.records if r.antigen_id == antigen_id]

    def layout(self, antigen_id: int, antibody: Optional[Sequence] = None) -> ComplexLayout:
        antibody = antibody or self.registry.wildtype(antigen_id)
        layout, _ = make_complex(
            antibody,
            self.registry.antigen(antigen_id),
            self.world.linker_repeats,
            self.world.cdr_positions,
        )
        return layout

    def docked(self, antigen_id: int, antibody_id: int) -> torch.Tensor:
        return self.docked_many([(antigen_id, antibody_id)])[0]

    def docked_many(self, pairs: List[Tuple[int, int]]) -> List[torch.Tensor]:
        """Docked complexes for many (antigen, antibody) pairs, folded as one batch."""
        sequences = [
            self.layout(i, self.registry.antibody(j)).complex_sequence() for i, j in pairs
        ]
        means = fold_batch(torch.stack([s.encode() for s in sequences]), self.tables)
        docked = []
        for (i, j), seq, mean in zip(pairs, sequences, means):
            rng = make_generator(self.docking_seed, "dock", i, j)
            x = oracle_ensemble_sample(seq, self.world.docking_fluctuation, rng, mean=mean)
            docked.append(x - x.mean(0, keepdim=True))
        return docked

    def save(self, directory: Union[str, Path]):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_csv(self.registry.to_frame(), directory / "registry.csv")
        energies = pd.DataFrame([r.model_dump() for r in self.records])
        energies["is_outlier"] = energies["is_outlier"].astype(int)
        write_csv(
            energies[["antigen_id", "antibody_id", "delta_g", "delta_g_noisy", "is_outlier"]],
            directory / "energies.csv",
        )
        labels = pd.DataFrame(
            [l.model_dump() for l in self.labels],
            columns=["antigen_id", "antibody_id", "delta_g"],
        )
        write_csv(labels[["antigen_id", "antibody_id", "delta_g"]], directory / "labels.csv")
        self.tables.save(directory / "tables")
        with open(directory / "dataset.json", "w") as f:
            json.dump(
                {
                    "docking_seed": self.docking_seed,
                    "num_heldout": self.num_heldout,
                    "world": self.world.model_dump(),
                    "noise": self.noise.model_dump(),
                },
                f,
                indent=2,
                sort_keys=True,
            )
        logger.info(f"Saved dataset with {len(self.records)} records to {directory}")

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ToyDataset":
        directory = Path(directory)
        if not (directory / "dataset.json").exists():
            raise CheckpointError(directory / "dataset.json", "dataset not found, run gen-data first")
        with open(directory / "dataset.json", "r") as f:
            meta = json.load(f)
        registry = Registry.from_frame(read_csv(directory / "registry.csv"))
        energies = read_csv(directory / "energies.csv")
        records = [
            EnergyRecord(
                antigen_id=int(row.antigen_id),
                antibody_id=int(row.antibody_id),
                delta_g=float(row.delta_g),
                delta_g_noisy=float(row.delta_g_noisy),
                is_outlier=bool(row.is_outlier),
            )
            for row in energies.itertuples(index=False)
        ]
        labels = [
            LabeledPair(
                antibody_id=int(row.antibody_id),
                antigen_id=int(row.antigen_id),
                delta_g=float(row.delta_g),
            )
            for row in read_csv(directory / "labels.csv").itertuples(index=False)
        ]
        return cls(
            registry=registry,
            records=records,
            labels=labels,
            world=WorldConfig(**meta["world"]),
            noise=NoiseConfig(**meta["noise"]),
            docking_seed=int(meta["docking_seed"]),
            num_heldout=int(meta["num_heldout"]),
            tables=load_tables(directory / "tables"),
        )


def sample_natural_antibodies(
    num: int, length: int, tables: WorldTables, rng: torch.Generator
) -> List[Sequence]:
    """Draws `num` antibodies from the order-1 Markov chain of natural antibodies."""
    states = torch.multinomial(tables.markov_initial.expand(num, -1), 1, generator=rng)[:, 0]
    columns = [states]
    for _ in range(length - 1):
        states = torch.multinomial(tables.markov_transition[states], 1, generator=rng)[:, 0]
        columns.append(states)
    indices = torch.stack(columns, dim=1)
    return [Sequence.from_indices(row.tolist()) for row in indices]


def sample_antigens(num: int, length: int, rng: torch.Generator) -> List[Sequence]:
    indices = torch.randint(0, len(ALPHABET), (num, length), generator=rng)
    return [Sequence.from_indices(row.tolist()) for row in indices]


def generate_dataset(
    num_antibodies: int,
    num_antigens: int,
    noise_cfg: NoiseConfig,
    rng: torch.Generator,
    world: Optional[WorldConfig] = None,
    tables: Optional[WorldTables] = None,
    num_labels: int = 120,
) -> ToyDataset:
    """
    One EnergyRecord per (antigen, antibody) pair, ordered antigen-major. The held-out antigens
    are the highest ids; exact-energy labels are drawn from the remaining ones.
    """
    if num_antibodies < 1 or num_antigens < 1:
        raise ValueError("a dataset needs at least one antibody and one antigen")
    world = (world or WorldConfig()).model_copy(
        update={"num_antibodies": num_antibodies, "num_antigens": num_antigens}
    )
    tables = tables or load_tables()

    antibodies = sample_natural_antibodies(num_antibodies, world.antibody_length, tables, rng)
    antigens = sample_antigens(num_antigens, world.antigen_length, rng)
    registry = Registry(tuple(antibodies), tuple(antigens))

    exact = torch.empty(num_antigens, num_antibodies, dtype=DTYPE)
    for antigen_id, antigen in enumerate(antigens):
        layout, _ = make_complex(antibodies[0], antigen, world.linker_repeats, world.cdr_positions)
        exact[antigen_id] = oracle_binding_energies(
            antibodies, antigen, layout, tables, world.contact_range
        )
    noisy, is_outlier = apply_noise(exact, noise_cfg, rng)
    records = [
        EnergyRecord(
            antigen_id=i,
            antibody_id=j,
            delta_g=float(exact[i, j]),
            delta_g_noisy=float(noisy[i, j]),
            is_outlier=bool(is_outlier[i, j]),
        )
        for i in range(num_antigens)
        for j in range(num_antibodies)
    ]

    num_heldout = min(world.heldout_antigens, num_antigens - 1)
    if num_heldout != world.heldout_antigens:
        logger.warning(
            f"Only {num_antigens} antigens: holding out {num_heldout} instead of {world.heldout_antigens}"
        )
    num_train = num_antigens - num_heldout
    pool = num_train * num_antibodies
    if num_labels > pool:
        logger.warning(f"Requested {num_labels} labels but only {pool} training pairs exist")
    chosen = torch.randperm(pool, generator=rng)[: min(num_labels, pool)].sort().values
    labels = [
        LabeledPair(
            antibody_id=int(c) % num_antibodies,
            antigen_id=int(c) // num_antibodies,
            delta_g=float(exact[int(c) // num_antibodies, int(c) % num_antibodies]),
        )
        for c in chosen
    ]
    docking_seed = int(torch.randint(0, 2**62, (1,), generator=rng))

    logger.info(
        f"Generated {len(records)} complexes ({int(is_outlier.sum())} outliers), {len(labels)} labels"
    )
    return ToyDataset(
        registry=registry,
        records=records,
        labels=labels,
        world=world,
        noise=noise_cfg,
        docking_seed=docking_seed,
        num_heldout=num_heldout,
        tables=tables,
    )


@dataclass(frozen=True)
class ComplexSample:
    layout: ComplexLayout
    sequence: Sequence  # the full complex
    coords: torch.Tensor  # (N, 3), centred


def sample_complex_corpus(
    dataset: ToyDataset,
    size: int,
    fluctuation_scale: float,
    rng: torch.Generator,
    antigen_ids: Optional[List[int]] = None,
) -> List[ComplexSample]:
    """Centred ensemble draws of random (natural antibody, antigen) complexes."""
    antigen_ids = antigen_ids if antigen_ids is not None else dataset.training_antigens
    if not antigen_ids:
        raise ValueError("corpus needs at least one antigen")
    pick_antigen = torch.randint(0, len(antigen_ids), (size,), generator=rng)
    pick_antibody = torch.randint(0, dataset.registry.num_antibodies, (size,), generator=rng)
    layouts = [
        dataset.layout(antigen_ids[int(a)], dataset.registry.antibody(int(b)))
        for a, b in zip(pick_antigen, pick_antibody)
    ]
    sequences = [layout.complex_sequence() for layout in layouts]
    means = fold_batch(torch.stack([s.encode() for s in sequences]), dataset.tables)
    noise = smooth_noise(means.shape[1], rng, size)
    coords = means + fluctuation_scale * noise
    coords = coords - coords.mean(1, keepdim=True)
    return [ComplexSample(l, s, x) for l, s, x in zip(layouts, sequences, coords)]
