"""
Ablation and hyperparameter-sweep harnesses. Every variant reuses the same trained artifacts
and the same seeds; metrics are computed per seed over all antigens and summarised by the median.
"""

import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence as TypingSequence

import numpy as np
import pandas as pd
from loguru import logger

from affinity_lab.data.dataset import write_csv
from affinity_lab.models.flow import schedule_for_steps
from affinity_lab.pipeline.design import Artifacts, affinity_flow_run, default_antigens
from affinity_lab.pipeline.metrics import compute_metrics
from affinity_lab.protocol import DesignRecord
from affinity_lab.utils.config import ExperimentConfig
from affinity_lab.utils.misc import log_event

VARIANTS = ["full", "one_iteration", "no_pc", "no_flow", "no_energy", "no_selection"]
METRICS = ["imp", "sim", "nat"]
SWEEP_PARAMETERS = ("gamma", "steps")


def with_overrides(cfg: ExperimentConfig, **run_fields: Any) -> ExperimentConfig:
    """A copy of `cfg` with `run` fields replaced; validators run again on the new tree."""
    tree = cfg.model_dump()
    for key, value in run_fields.items():
        node = tree["run"]
        *parents, leaf = key.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    return ExperimentConfig.model_validate(tree)


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    flags = {name: False for name in VARIANTS[1:]}
    if variant != "full":
        flags[variant] = True
    return with_overrides(cfg, ablation=flags)


def per_seed_metrics(
    designs: TypingSequence[DesignRecord], cdr_positions: TypingSequence[int], tables=None
) -> List[Dict[str, Any]]:
    rows = []
    for seed in sorted({d.seed for d in designs}):
        report = compute_metrics(
            [d for d in designs if d.seed == seed], cdr_positions, tables
        )
        rows.append({"seed": seed, "imp": report.imp, "sim": report.sim, "nat": report.nat})
    return rows


def median_row(rows: TypingSequence[Dict[str, Any]]) -> Dict[str, float]:
    out = {}
    for metric in METRICS:
        values = [r[metric] for r in rows if r[metric] is not None]
        out[metric] = float(np.median(values)) if values else math.nan
    return out


def evaluate_config(
    cfg: ExperimentConfig,
    artifacts: Artifacts,
    antigen_ids: Optional[TypingSequence[int]] = None,
) -> List[Dict[str, Any]]:
    designs = affinity_flow_run(cfg, artifacts, antigen_ids)
    dataset = artifacts.dataset
    return per_seed_metrics(designs, dataset.world.cdr_positions, dataset.tables)


def run_ablations(
    cfg: ExperimentConfig,
    artifacts: Artifacts,
    variants: TypingSequence[str] = VARIANTS,
    out_dir: Optional[Path] = None,
) -> pd.DataFrame:
    """One median row per variant; per-seed rows go to ablation_seeds.csv."""
    antigen_ids = default_antigens(cfg, artifacts.dataset)
    summary, seeds = [], []
    for variant in variants:
        rows = evaluate_config(variant_config(cfg, variant), artifacts, antigen_ids)
        seeds.extend({"variant": variant, **row} for row in rows)
        medians = median_row(rows)
        summary.append({"variant": variant, **medians, "num_seeds": len(rows)})
        log_event("ablation variant", variant=variant, **medians)

    frame = pd.DataFrame(summary, columns=["variant", *METRICS, "num_seeds"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(frame, out_dir / "ablation.csv")
        write_csv(
            pd.DataFrame(seeds, columns=["variant", "seed", *METRICS]),
            out_dir / "ablation_seeds.csv",
        )
    return frame


def normalise(value: float, default: float) -> float:
    if default == 0.0 or math.isnan(default):
        if value == 0.0:
            return 1.0
        logger.warning(f"Cannot normalise {value} by a default value of {default}")
        return math.nan
    return value / default


def sweep_config(cfg: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    if parameter == "gamma":
        return with_overrides(cfg, **{"guidance.gamma": float(value)})
    if parameter == "steps":
        return with_overrides(cfg, schedule=schedule_for_steps(int(value)))
    raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")


def run_sweep(
    parameter: str,
    cfg: ExperimentConfig,
    artifacts: Artifacts,
    out_dir: Optional[Path] = None,
) -> pd.DataFrame:
    """
    Median IMP/Sim/Nat per grid value, plus each metric divided by its value at the default
    setting. The default point is run even when it is not on the grid.
    """
    if parameter == "gamma":
        grid, default = list(cfg.sweep.gammas), cfg.sweep.default_gamma
    elif parameter == "steps":
        grid, default = list(cfg.sweep.steps), cfg.sweep.default_steps
    else:
        raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")

    antigen_ids = default_antigens(cfg, artifacts.dataset)
    medians = {}
    for value in dict.fromkeys([*grid, default]):
        rows = evaluate_config(sweep_config(cfg, parameter, value), artifacts, antigen_ids)
        medians[value] = median_row(rows)
        log_event("sweep point", parameter=parameter, value=value, **medians[value])

    reference = medians[default]
    rows = []
    for value in grid:
        row = {"value": value, **medians[value]}
        for metric in METRICS:
            row[f"{metric}_norm"] = normalise(medians[value][metric], reference[metric])
        rows.append(row)
    frame = pd.DataFrame(
        rows, columns=["value", *METRICS, *(f"{m}_norm" for m in METRICS)]
    )
    if out_dir is not None:
        write_csv(frame, Path(out_dir) / f"sweep_{parameter}.csv")
    return frame
