import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence as TypingSequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from scipy.stats import spearmanr

from affinity_lab.coteach.pairs import consensus_filter
from affinity_lab.data.dataset import ToyDataset
from affinity_lab.models.predictors import PairScorer
from affinity_lab.protocol import PairwiseLabel
from affinity_lab.utils.config import TrainConfig
from affinity_lab.utils.misc import log_event
from affinity_lab.utils.optimizer import train_epochs
from affinity_lab.utils.progress_tracker import LossCurve
from affinity_lab.world.oracle import DTYPE


def pairwise_loss(margin: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample binary cross-entropy with p(Y = 1) = σ(ΔĜ_ij - ΔĜ_ik)."""
    return F.binary_cross_entropy_with_logits(margin, y.to(margin.dtype), reduction="none")


def pairwise_finetune(
    scorer: PairScorer,
    kept: TypingSequence[PairwiseLabel],
    ft_cfg: TrainConfig,
    rng: torch.Generator,
    stage: Optional[str] = None,
    wandb_run=None,
) -> Tuple[PairScorer, LossCurve]:
    if not kept:
        raise ValueError("pairwise fine-tuning needs at least one label")
    antigen_ids = [l.antigen_id for l in kept]
    j_ids = [l.antibody_j for l in kept]
    k_ids = [l.antibody_k for l in kept]
    y = torch.tensor([l.y for l in kept], dtype=DTYPE)
    scorer.prefetch(list(zip(antigen_ids, j_ids)) + list(zip(antigen_ids, k_ids)))

    def batch_loss(batch: torch.LongTensor, gen: torch.Generator) -> torch.Tensor:
        ids = batch.tolist()
        antigens = [antigen_ids[i] for i in ids]
        margin = scorer.score(antigens, [j_ids[i] for i in ids]) - scorer.score(
            antigens, [k_ids[i] for i in ids]
        )
        return pairwise_loss(margin, y[batch]).mean()

    stage = stage or f"{scorer.name}_pairwise"
    curve = train_epochs(scorer.model, len(kept), batch_loss, ft_cfg, rng, stage, wandb_run)
    return scorer, curve


def finetune_unfiltered(
    scorer: PairScorer,
    labels: TypingSequence[PairwiseLabel],
    ft_cfg: TrainConfig,
    rng: torch.Generator,
    rounds: int = 1,
    wandb_run=None,
) -> PairScorer:
    """Fine-tunes a copy on every label, `rounds` times, without consensus selection."""
    student = copy.deepcopy(scorer)
    for _ in range(rounds):
        pairwise_finetune(student, labels, ft_cfg, rng, f"{scorer.name}_unfiltered", wandb_run)
    return student


@dataclass
class RoundReport:
    round: int
    teacher: str
    kept: int
    dropped: int
    agreement: float
    post_spearman_seq: float = float("nan")
    post_spearman_struct: float = float("nan")


@dataclass
class CoteachResult:
    seq: PairScorer
    struct: PairScorer
    reports: List[RoundReport] = field(default_factory=list)

    def agreement(self, teacher: str) -> List[float]:
        return [r.agreement for r in self.reports if r.teacher == teacher]


def coteach_round(
    f_alpha: PairScorer,
    f_beta: PairScorer,
    labels: TypingSequence[PairwiseLabel],
    rounds: int,
    ft_cfg: TrainConfig,
    rng: torch.Generator,
    order: str = "seq_first",
    evaluate: Optional[Callable[[PairScorer], float]] = None,
    wandb_run=None,
) -> CoteachResult:
    """
    Each round, one predictor filters the labels and the other is fine-tuned on what it kept;
    then the roles swap, with the freshly tuned predictor as teacher. Inputs are not modified.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    result = CoteachResult(seq=copy.deepcopy(f_alpha), struct=copy.deepcopy(f_beta))
    for round_index in range(rounds):
        pairs = [(result.seq, result.struct), (result.struct, result.seq)]
        if order == "struct_first":
            pairs.reverse()
        for teacher, student in pairs:
            report = consensus_filter(teacher, labels)
            if report.kept:
                pairwise_finetune(
                    student, report.kept, ft_cfg, rng, f"{student.name}_coteach", wandb_run
                )
            else:
                logger.warning(
                    f"Round {round_index}: {teacher.name} kept no labels; skipping {student.name} fine-tune"
                )
            row = RoundReport(
                round=round_index,
                teacher=teacher.name,
                kept=len(report.kept),
                dropped=len(report.dropped),
                agreement=report.agreement_rate,
            )
            if evaluate is not None:
                row.post_spearman_seq = evaluate(result.seq)
                row.post_spearman_struct = evaluate(result.struct)
            result.reports.append(row)
            log_event("coteach filter", **row.__dict__)
    return result


@dataclass
class SpearmanReport:
    mean: float
    per_antigen: Dict[int, float]
    constant: List[int]


def spearman_eval(scorer: PairScorer, antigen_ids: TypingSequence[int], dataset: ToyDataset) -> SpearmanReport:
    """
    Mean over antigens of the Spearman correlation between predicted ΔĜ and the exact oracle
    ΔG over every antibody (average ranks for ties). Constant predictions count as 0.
    """
    antibodies = list(range(dataset.registry.num_antibodies))
    if len(antibodies) < 2:
        raise ValueError("spearman evaluation needs at least two antibodies per antigen")
    scorer.prefetch([(i, j) for i in antigen_ids for j in antibodies])
    per_antigen, constant = {}, []
    for antigen_id in antigen_ids:
        predicted = scorer.predict([antigen_id] * len(antibodies), antibodies).numpy()
        exact = np.array([dataset.record(antigen_id, j).delta_g for j in antibodies])
        if np.ptp(predicted) == 0 or np.ptp(exact) == 0:
            constant.append(antigen_id)
            per_antigen[antigen_id] = 0.0
            continue
        rho, _ = spearmanr(predicted, exact)
        per_antigen[antigen_id] = float(rho) if math.isfinite(rho) else 0.0
    if constant:
        logger.warning(f"Constant predictions or energies for antigens {constant}; counted as R = 0")
    mean = float(np.mean(list(per_antigen.values()))) if per_antigen else 0.0
    return SpearmanReport(mean=mean, per_antigen=per_antigen, constant=constant)
