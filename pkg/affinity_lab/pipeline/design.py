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

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence as TypingSequence, Tuple, Union

import pandas as pd
import torch
from loguru import logger

from affinity_lab.data.dataset import ToyDataset, read_csv, write_csv
from affinity_lab.guidance import corrector_relax, guided_sample
from affinity_lab.models.flow import FlowModel
from affinity_lab.models.inverse_folding import (
    InverseFoldModel,
    MutationProposal,
    propose_mutations,
    rank_proposals,
)
from affinity_lab.models.predictors import SeqPredictor, StructPredictor, grad_struct
from affinity_lab.protocol import DesignRecord
from affinity_lab.utils.config import AblationFlags, ExperimentConfig
from affinity_lab.utils.exceptions import CheckpointError
from affinity_lab.utils.misc import log_event, make_generator
from affinity_lab.utils.state_loader import load_checkpoint
from affinity_lab.world.oracle import DTYPE, docked_structure, oracle_binding_energy
from affinity_lab.world.sequences import ComplexLayout, Sequence

CHECKPOINTS = {
    "flow": "flow.aflb",
    "inverse_fold": "inverse_fold.aflb",
    "seq_supervised": "seq_supervised.aflb",
    "struct_supervised": "struct_supervised.aflb",
    "seq_unfiltered": "seq_unfiltered.aflb",
    "struct_unfiltered": "struct_unfiltered.aflb",
    "seq_coteach": "seq_coteach.aflb",
    "struct_coteach": "struct_coteach.aflb",
}

DESIGN_COLUMNS = list(DesignRecord.model_fields)
PROPOSAL_COLUMNS = [
    "antigen_id",
    "seed",
    "iteration",
    "arity",
    "positions",
    "parent_hash",
    "mutant_sequence",
    "seq_score",
    "selected",
]


@dataclass
class Artifacts:
    """Everything a design run reads; shared read-only across antigens."""

    dataset: ToyDataset
    flow: FlowModel
    inverse_fold: InverseFoldModel
    seq_predictors: Dict[str, SeqPredictor]
    struct_predictors: Dict[str, StructPredictor]

    def predictors_for(self, flags: AblationFlags) -> Tuple[SeqPredictor, StructPredictor]:
        """no_energy uses supervised-only predictors, no_selection the unfiltered fine-tunes."""
        key = "coteach"
        if flags.no_energy:
            key = "supervised"
        elif flags.no_selection:
            key = "unfiltered"
        return self.seq_predictors[key], self.struct_predictors[key]


def load_artifacts(cfg: ExperimentConfig, dataset: Optional[ToyDataset] = None) -> Artifacts:
    directory = Path(cfg.checkpoint_dir)
    missing = [directory / name for name in CHECKPOINTS.values() if not (directory / name).exists()]
    if missing:
        raise CheckpointError(missing[0], "missing checkpoint, run the training stages first")
    dataset = dataset or ToyDataset.load(cfg.data_dir)

    def load(key, cls):
        model, _ = load_checkpoint(cls, directory / CHECKPOINTS[key])
        return model

    return Artifacts(
        dataset=dataset,
        flow=load("flow", FlowModel),
        inverse_fold=load("inverse_fold", InverseFoldModel),
        seq_predictors={k: load(f"seq_{k}", SeqPredictor) for k in ("supervised", "unfiltered", "coteach")},
        struct_predictors={
            k: load(f"struct_{k}", StructPredictor) for k in ("supervised", "unfiltered", "coteach")
        },
    )


def descend_predictor(
    f_beta: StructPredictor,
    x: torch.Tensor,
    seq: Sequence,
    layout: ComplexLayout,
    step_size: float,
    iters: int,
    cdr_only: bool = True,
) -> torch.Tensor:
    """Plain gradient descent of f̂_β on the coordinates of an existing structure."""
    mask = layout.cdr_mask(DTYPE) if cdr_only else torch.ones(layout.global_length, 1, dtype=DTYPE)
    for _ in range(iters):
        x = x - step_size * mask * grad_struct(f_beta, x, seq, layout)
    return x


def mutation_path(wildtype: Sequence, design: Sequence) -> str:
    return ";".join(
        f"{a}{p}{b}" for p, (a, b) in enumerate(zip(wildtype.residues, design.residues)) if a != b
    )


@dataclass
class AntigenRun:
    designs: List[DesignRecord]
    proposals: List[Dict] = field(default_factory=list)


def design_antigen(
    cfg: ExperimentConfig, artifacts: Artifacts, antigen_id: int, seed: int
) -> AntigenRun:
    """
    Alternating optimisation for one (antigen, seed): relax the reference structure, sample
    low-energy structures, propose CDR mutations on the best one and keep the sequences f_alpha
    ranks highest. Iterations are strictly sequential.
    """
    run = cfg.run
    flags = run.ablation
    dataset = artifacts.dataset
    world = dataset.world
    tables = dataset.tables
    f_alpha, f_beta = artifacts.predictors_for(flags)
    relax = None if flags.no_pc else run.relax
    rng = make_generator(cfg.seed, "design", antigen_id, seed)

    antigen = dataset.registry.antigen(antigen_id)
    wildtype = dataset.registry.wildtype(antigen_id)
    wt_layout = dataset.layout(antigen_id)
    wildtype_dg = oracle_binding_energy(wildtype, antigen, wt_layout, tables, world.contact_range)

    pool: Dict[str, Tuple[MutationProposal, int]] = {}
    proposal_rows = []
    parents = [wildtype]
    for iteration in range(run.iterations):
        selected_all: List[MutationProposal] = []
        for parent in parents:
            layout = wt_layout.with_antibody(parent)
            seq = layout.complex_sequence()
            reference = docked_structure(parent, antigen, layout, rng, world.docking_fluctuation, tables)
            if relax is not None:
                reference = corrector_relax(reference, relax)

            if flags.no_flow:
                x = descend_predictor(
                    f_beta,
                    reference,
                    seq,
                    layout,
                    run.no_flow_step_size,
                    run.no_flow_iters,
                    run.guidance.cdr_only,
                )
                if relax is not None:
                    x = corrector_relax(x, relax)
            else:
                samples = guided_sample(
                    artifacts.flow,
                    f_beta,
                    seq,
                    layout,
                    run.schedule,
                    run.guidance,
                    relax,
                    rng,
                    num_samples=run.structure_samples,
                    interpretation=run.schedule_interpretation,
                    stiffness=cfg.flow.stiffness,
                )
                with torch.no_grad():
                    scores = f_beta(samples, seq.encode(), layout)
                x = samples[int(torch.argmin(scores))]

            proposals = propose_mutations(
                artifacts.inverse_fold,
                x,
                seq,
                layout,
                run.mutation.arities,
                run.mutation.per_arity,
                rng,
                run.mutation.position_weighting,
            )
            proposals = [p for p in proposals if p.sequence != wildtype]
            if not proposals:
                continue
            ranked = rank_proposals(f_alpha, proposals, antigen)
            selected = ranked[: run.mutation.top_m]
            for rank, p in enumerate(ranked):
                proposal_rows.append(
                    {
                        "antigen_id": antigen_id,
                        "seed": seed,
                        "iteration": iteration,
                        "arity": p.arity,
                        "positions": "|".join(str(q) for q in p.positions),
                        "parent_hash": p.parent_hash,
                        "mutant_sequence": p.sequence.residues,
                        "seq_score": p.seq_score,
                        "selected": int(rank < run.mutation.top_m),
                    }
                )
            selected_all.extend(selected)
            for p in selected:
                pool.setdefault(p.sequence.residues, (p, iteration))

        if not selected_all:
            logger.warning(f"Antigen {antigen_id} seed {seed}: no proposals at iteration {iteration}")
            break
        selected_all.sort(key=lambda p: (p.seq_score, p.arity, p.sequence.residues))
        parents = list(dict.fromkeys(p.sequence for p in selected_all))[: run.carry_forward]

    ranked_pool = sorted(
        pool.values(), key=lambda item: (item[0].seq_score, item[0].arity, item[0].sequence.residues)
    )
    designs = []
    for rank, (proposal, iteration) in enumerate(ranked_pool[: run.final_designs]):
        designs.append(
            DesignRecord(
                antigen_id=antigen_id,
                seed=seed,
                rank=rank,
                sequence=proposal.sequence.residues,
                wildtype=wildtype.residues,
                oracle_dg=oracle_binding_energy(
                    proposal.sequence, antigen, wt_layout, tables, world.contact_range
                ),
                wildtype_dg=wildtype_dg,
                seq_score=proposal.seq_score,
                iteration=iteration,
                mutation_path=mutation_path(wildtype, proposal.sequence),
            )
        )
    if not designs:
        logger.warning(f"Antigen {antigen_id} seed {seed}: empty candidate pool, emitting wildtype")
        designs.append(
            DesignRecord(
                antigen_id=antigen_id,
                seed=seed,
                rank=0,
                sequence=wildtype.residues,
                wildtype=wildtype.residues,
                oracle_dg=wildtype_dg,
                wildtype_dg=wildtype_dg,
                is_fallback=True,
            )
        )

    log_event(
        "antigen designed",
        antigen_id=antigen_id,
        seed=seed,
        variant=flags.variant,
        best_oracle_dg=min(d.oracle_dg for d in designs),
        wildtype_dg=wildtype_dg,
        pool_size=len(pool),
    )
    return AntigenRun(designs=designs, proposals=proposal_rows)


def affinity_flow_run(
    cfg: ExperimentConfig,
    artifacts: Artifacts,
    antigen_ids: Optional[TypingSequence[int]] = None,
    seeds: Optional[TypingSequence[int]] = None,
    proposals: Optional[List[Dict]] = None,
) -> List[DesignRecord]:
    """
    Designs for every (antigen, seed), ordered by antigen, then seed, then rank. Work units
    are independent and may run on `run.workers` threads without changing any output.
    """
    antigen_ids = list(antigen_ids if antigen_ids is not None else default_antigens(cfg, artifacts.dataset))
    seeds = list(seeds if seeds is not None else cfg.run.seeds)
    units = [(a, s) for a in antigen_ids for s in seeds]
    logger.info(
        f"Designing {len(antigen_ids)} antigens x {len(seeds)} seeds ({cfg.run.ablation.variant})"
    )
    if cfg.run.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.run.workers) as pool:
            results = list(pool.map(lambda unit: design_antigen(cfg, artifacts, *unit), units))
    else:
        results = [design_antigen(cfg, artifacts, a, s) for a, s in units]

    designs = [d for r in results for d in r.designs]
    if proposals is not None:
        proposals.extend(row for r in results for row in r.proposals)
    return designs


def default_antigens(cfg: ExperimentConfig, dataset: ToyDataset) -> List[int]:
    return list(cfg.run.antigens) if cfg.run.antigens else dataset.heldout_antigens


def save_designs(designs: TypingSequence[DesignRecord], path: Union[str, Path]):
    frame = pd.DataFrame([d.model_dump() for d in designs], columns=DESIGN_COLUMNS)
    frame["is_fallback"] = frame["is_fallback"].astype(int)
    write_csv(frame, path)


def load_designs(path: Union[str, Path]) -> List[DesignRecord]:
    frame = read_csv(path, keep_default_na=False)
    records = []
    for row in frame.to_dict("records"):
        row["seq_score"] = None if row["seq_score"] == "" else float(row["seq_score"])
        row["mutation_path"] = str(row["mutation_path"])
        row["is_fallback"] = bool(int(row["is_fallback"]))
        records.append(DesignRecord(**row))
    return records


def save_proposals(rows: TypingSequence[Dict], path: Union[str, Path]):
    write_csv(pd.DataFrame(list(rows), columns=PROPOSAL_COLUMNS), path)
