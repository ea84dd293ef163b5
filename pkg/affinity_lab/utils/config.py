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

import argparse
import copy
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from loguru import logger
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    confloat,
    conint,
    field_validator,
    model_validator,
)

from affinity_lab import __run__, __version__
from affinity_lab.utils.exceptions import ConfigError

DEFAULT_SCHEDULE = [1.0, 0.6, 0.3, 0.0]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class TrainConfig(_Section):
    epochs: conint(ge=0) = 100
    batch_size: conint(ge=1) = 32
    learning_rate: confloat(gt=0.0) = 1e-3
    weight_decay: confloat(ge=0.0) = 0.0


class NoiseConfig(_Section):
    gaussian_sigma: confloat(ge=0.0) = 1.0
    outlier_rate: confloat(ge=0.0, le=1.0) = 0.1
    # None means 10x gaussian_sigma.
    outlier_magnitude: Optional[confloat(ge=0.0)] = None

    @property
    def magnitude(self) -> float:
        if self.outlier_magnitude is None:
            return 10.0 * self.gaussian_sigma
        return self.outlier_magnitude


class WorldConfig(_Section):
    num_antibodies: conint(ge=1) = 77
    num_antigens: conint(ge=1) = 54
    antibody_length: conint(ge=1) = 24
    antigen_length: conint(ge=1) = 16
    cdr_positions: List[conint(ge=0)] = Field(
        default_factory=lambda: [16, 17, 18, 19, 20, 21]
    )
    linker_repeats: conint(ge=0, le=32) = 4
    contact_range: confloat(gt=0.0) = 2.0
    fluctuation_scale: confloat(ge=0.0) = 0.3
    docking_fluctuation: confloat(ge=0.0) = 0.3
    heldout_antigens: conint(ge=0) = 10

    @model_validator(mode="after")
    def check_cdr_inside_antibody(self):
        bad = [p for p in self.cdr_positions if p >= self.antibody_length]
        if bad:
            raise ValueError(
                f"cdr position {bad[0]} outside antibody of length {self.antibody_length}"
            )
        if len(set(self.cdr_positions)) != len(self.cdr_positions):
            raise ValueError("cdr_positions contains duplicates")
        return self


class FlowConfig(_Section):
    hidden_dim: conint(ge=1) = 128
    embed_dim: conint(ge=2) = 16
    time_embed_dim: conint(ge=2) = 16
    stiffness: confloat(gt=0.0) = 3.0
    num_structures: conint(ge=1) = 256
    train: TrainConfig = Field(
        default_factory=lambda: TrainConfig(epochs=300, batch_size=32, learning_rate=1e-3)
    )


class PredictorConfig(_Section):
    hidden_dim: conint(ge=1) = 64
    embed_dim: conint(ge=2) = 16
    num_neighbors: conint(ge=1) = 8
    num_labels: conint(ge=1) = 120
    validation_fraction: confloat(ge=0.0, lt=1.0) = 0.2
    train: TrainConfig = Field(
        default_factory=lambda: TrainConfig(epochs=200, batch_size=32, learning_rate=1e-3)
    )


class InverseFoldingConfig(_Section):
    hidden_dim: conint(ge=1) = 64
    embed_dim: conint(ge=2) = 8
    num_neighbors: conint(ge=1) = 8
    corpus_size: conint(ge=1) = 512
    heldout_fraction: confloat(ge=0.0, lt=1.0) = 0.2
    train: TrainConfig = Field(
        default_factory=lambda: TrainConfig(epochs=100, batch_size=64, learning_rate=1e-3)
    )


class GuidanceConfig(_Section):
    gamma: confloat(ge=0.0) = 5.0
    t_min_guidance: confloat(ge=0.0, le=1.0) = 0.5
    cdr_only: bool = True


class RelaxConfig(_Section):
    max_iters: conint(ge=1) = 200
    step_size: confloat(gt=0.0) = 0.05
    bond_weight: confloat(gt=0.0) = 1.0
    clash_weight: confloat(gt=0.0) = 1.0
    clash_radius: confloat(gt=0.0) = 1.0


class MutationConfig(_Section):
    arities: List[conint(ge=1, le=3)] = Field(default_factory=lambda: [1, 2, 3])
    per_arity: conint(ge=1) = 8
    top_m: conint(ge=1) = 4
    position_weighting: Literal["entropy", "uniform"] = "entropy"


class AblationFlags(_Section):
    one_iteration: bool = False
    no_pc: bool = False
    no_flow: bool = False
    no_energy: bool = False
    no_selection: bool = False

    @property
    def variant(self) -> str:
        active = [name for name, value in self.model_dump().items() if value]
        return "+".join(active) if active else "full"


class RunConfig(_Section):
    iterations: conint(ge=1) = 3
    schedule: List[confloat(ge=0.0, le=1.0)] = Field(
        default_factory=lambda: list(DEFAULT_SCHEDULE)
    )
    schedule_interpretation: Literal["noise", "time"] = "noise"
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    relax: RelaxConfig = Field(default_factory=RelaxConfig)
    mutation: MutationConfig = Field(default_factory=MutationConfig)
    final_designs: conint(ge=1) = 3
    carry_forward: conint(ge=1) = 1
    structure_samples: conint(ge=1) = 4
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    antigens: Optional[List[conint(ge=0)]] = None
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    no_flow_step_size: confloat(gt=0.0) = 0.01
    no_flow_iters: conint(ge=1) = 50
    workers: conint(ge=1) = 1

    @field_validator("schedule")
    @classmethod
    def check_schedule(cls, levels):
        if len(levels) < 2:
            raise ValueError("schedule needs at least two levels")
        if levels[-1] != 0.0:
            raise ValueError("schedule must end at 0.0")
        if any(b >= a for a, b in zip(levels, levels[1:])):
            raise ValueError("schedule must be strictly decreasing")
        return levels

    @model_validator(mode="before")
    @classmethod
    def one_iteration_forces_single_pass(cls, data):
        if not isinstance(data, dict):
            return data
        ablation = data.get("ablation") or {}
        if isinstance(ablation, AblationFlags):
            one_iteration = ablation.one_iteration
        else:
            one_iteration = bool(ablation.get("one_iteration", False))
        if one_iteration:
            data = {**data, "iterations": 1}
        return data


class CoteachConfig(_Section):
    pairs_per_antigen: conint(ge=1) = 64
    tie_epsilon: confloat(ge=0.0) = 1e-9
    rounds: conint(ge=1) = 2
    order: Literal["seq_first", "struct_first"] = "seq_first"
    finetune: TrainConfig = Field(
        default_factory=lambda: TrainConfig(epochs=40, batch_size=256, learning_rate=1e-4)
    )


class SweepConfig(_Section):
    gammas: List[confloat(ge=0.0)] = Field(
        default_factory=lambda: [0.0, 2.5, 5.0, 7.5, 10.0]
    )
    steps: List[conint(ge=1)] = Field(default_factory=lambda: [1, 2, 3, 4])
    default_gamma: confloat(ge=0.0) = 5.0
    default_steps: conint(ge=1) = 3


class LoggingConfig(_Section):
    level: Literal["TRACE", "DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    dont_save_events: bool = False
    events_retention_size: str = "100 MB"
    wandb: bool = False
    wandb_project: str = "affinity_lab"
    wandb_entity: Optional[str] = None


class ExperimentConfig(_Section):
    seed: int = 0
    out: str = "runs/default"
    run_id: str = f"v{__version__.replace('.', '_')}_r{__run__}"
    world: WorldConfig = Field(default_factory=WorldConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    predictors: PredictorConfig = Field(default_factory=PredictorConfig)
    inverse_folding: InverseFoldingConfig = Field(default_factory=InverseFoldingConfig)
    coteach: CoteachConfig = Field(default_factory=CoteachConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @property
    def data_dir(self) -> Path:
        return Path(self.out) / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.out) / "checkpoints"


def _set_path(tree: Dict[str, Any], dotted: str, value: Any):
    node = tree
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path) -> Dict[str, Any]:
    path = Path(path).expanduser()
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r") as f:
        tree = yaml.safe_load(f) or {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config file {path} must hold a mapping at top level")
    return tree


def build_config(
    file_tree: Optional[Dict[str, Any]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    Resolves defaults <- config file <- dotted overrides into a validated ExperimentConfig.
    """
    tree = ExperimentConfig().model_dump()
    if file_tree:
        tree = _merge(tree, file_tree)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(tree, dotted, value)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid config at {where or '<root>'}: {first['msg']}") from e


def dump_config(cfg: ExperimentConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.model_dump(), f, sort_keys=False)


def check_config(cfg: ExperimentConfig):
    r"""Checks/validates the resolved config and prepares the output directory."""
    full_path = os.path.expanduser(cfg.out)
    os.makedirs(full_path, exist_ok=True)
    if cfg.world.heldout_antigens >= cfg.world.num_antigens:
        raise ConfigError(
            f"world.heldout_antigens ({cfg.world.heldout_antigens}) must leave at least "
            f"one training antigen out of {cfg.world.num_antigens}"
        )
    if max(cfg.run.mutation.arities) > len(cfg.world.cdr_positions):
        raise ConfigError(
            f"mutation arity {max(cfg.run.mutation.arities)} exceeds "
            f"{len(cfg.world.cdr_positions)} CDR positions"
        )
    logger.debug(f"Output directory: {full_path}")


def add_args(parser: argparse.ArgumentParser):
    """
    Adds relevant arguments to the parser for operation.
    """
    parser.add_argument("--config", type=str, help="YAML config file", default=None)
    parser.add_argument("--seed", type=int, help="Master seed", default=None)
    parser.add_argument("--out", type=str, help="Output directory", default=None)

    parser.add_argument(
        "--world.num_antibodies",
        type=int,
        help="Number of natural antibodies in the dataset",
        default=None,
    )
    parser.add_argument(
        "--world.num_antigens",
        type=int,
        help="Number of antigens in the dataset",
        default=None,
    )
    parser.add_argument(
        "--world.linker_repeats",
        type=int,
        help="Number of GGGGS units between antibody and antigen",
        default=None,
    )
    parser.add_argument(
        "--world.heldout_antigens",
        type=int,
        help="Antigens held out from labels and pairwise data",
        default=None,
    )

    parser.add_argument(
        "--noise.gaussian_sigma",
        type=float,
        help="Std of the simulated docking+scoring error",
        default=None,
    )
    parser.add_argument(
        "--noise.outlier_rate",
        type=float,
        help="Probability that a simulated energy is an outlier",
        default=None,
    )

    parser.add_argument(
        "--flow.train.epochs",
        type=int,
        help="Flow model training epochs",
        default=None,
    )
    parser.add_argument(
        "--flow.train.learning_rate",
        type=float,
        help="Flow model learning rate",
        default=None,
    )
    parser.add_argument(
        "--predictors.train.epochs",
        type=int,
        help="Supervised predictor training epochs",
        default=None,
    )
    parser.add_argument(
        "--predictors.num_labels",
        type=int,
        help="Number of exact-energy labels for supervised pretraining",
        default=None,
    )
    parser.add_argument(
        "--inverse_folding.train.epochs",
        type=int,
        help="Inverse folding training epochs",
        default=None,
    )

    parser.add_argument(
        "--coteach.rounds",
        type=int,
        help="Number of co-teaching rounds",
        default=None,
    )
    parser.add_argument(
        "--coteach.pairs_per_antigen",
        type=int,
        help="Pairwise labels sampled per antigen",
        default=None,
    )
    parser.add_argument(
        "--coteach.finetune.epochs",
        type=int,
        help="Pairwise fine-tuning epochs per round",
        default=None,
    )

    parser.add_argument(
        "--run.iterations",
        type=int,
        help="Alternating optimization iterations",
        default=None,
    )
    parser.add_argument(
        "--run.schedule",
        type=float,
        nargs="+",
        help="Noise-level schedule, e.g. 1.0 0.6 0.3 0.0",
        default=None,
    )
    parser.add_argument(
        "--run.schedule_interpretation",
        type=str,
        choices=["noise", "time"],
        help="Whether schedule levels are noise levels or flow times",
        default=None,
    )
    parser.add_argument(
        "--run.guidance.gamma",
        type=float,
        help="Predictor guidance scaling factor",
        default=None,
    )
    parser.add_argument(
        "--run.guidance.t_min_guidance",
        type=float,
        help="Apply guidance only at flow times >= this value",
        default=None,
    )
    parser.add_argument(
        "--run.final_designs",
        type=int,
        help="Designs emitted per antigen",
        default=None,
    )
    parser.add_argument(
        "--run.seeds",
        type=int,
        nargs="+",
        help="Seeds for design runs",
        default=None,
    )
    parser.add_argument(
        "--run.antigens",
        type=int,
        nargs="+",
        help="Antigen ids to design against (default: held-out antigens)",
        default=None,
    )
    parser.add_argument(
        "--run.workers",
        type=int,
        help="Antigens processed concurrently",
        default=None,
    )
    for flag in ("one_iteration", "no_pc", "no_flow", "no_energy", "no_selection"):
        parser.add_argument(
            f"--run.ablation.{flag}",
            action="store_const",
            const=True,
            help=f"Ablation: {flag}",
            default=None,
        )

    parser.add_argument(
        "--logging.level",
        type=str,
        help="Log level for the console sink",
        default=None,
    )
    parser.add_argument(
        "--logging.dont_save_events",
        action="store_const",
        const=True,
        help="If set, we dont save events to a log file.",
        default=None,
    )
    parser.add_argument(
        "--logging.wandb",
        action="store_const",
        const=True,
        help="Toggles wandb logging for the project",
        default=None,
    )


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = vars(args)
    file_tree = load_config_file(values["config"]) if values.get("config") else None
    overrides = {
        key: value
        for key, value in values.items()
        if key not in ("config", "command", "handler") and value is not None
    }
    return build_config(file_tree, overrides)
