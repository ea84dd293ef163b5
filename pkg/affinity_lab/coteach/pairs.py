from collections import defaultdict
from typing import Dict, List, Sequence as TypingSequence, Tuple

import pandas as pd
import torch
from loguru import logger

from affinity_lab.data.dataset import read_csv, write_csv
from affinity_lab.models.predictors import PairScorer
from affinity_lab.protocol import ConsensusReport, EnergyRecord, PairwiseLabel


def build_pairs(
    records: TypingSequence[EnergyRecord],
    pairs_per_antigen: int,
    tie_epsilon: float,
    rng: torch.Generator,
) -> List[PairwiseLabel]:
    """
    Per antigen, samples unordered antibody pairs (j < k) uniformly without replacement and
    labels them from the noisy energies; |ddg| < tie_epsilon pairs are dropped.
    """
    by_antigen: Dict[int, Dict[int, float]] = defaultdict(dict)
    for r in records:
        by_antigen[r.antigen_id][r.antibody_id] = r.delta_g_noisy

    labels = []
    for antigen_id in sorted(by_antigen):
        energies = by_antigen[antigen_id]
        antibodies = sorted(energies)
        if len(antibodies) < 2:
            logger.warning(f"Antigen {antigen_id} has fewer than two antibodies; no pairs built")
            continue
        combos = torch.combinations(torch.tensor(antibodies), 2)
        count = pairs_per_antigen
        if count > len(combos):
            logger.warning(
                f"Antigen {antigen_id}: {pairs_per_antigen} pairs requested, "
                f"only {len(combos)} available; clamping"
            )
            count = len(combos)
        for idx in torch.randperm(len(combos), generator=rng)[:count]:
            j, k = (int(v) for v in combos[idx])
            ddg = energies[j] - energies[k]
            if abs(ddg) < tie_epsilon or ddg == 0:
                continue
            labels.append(
                PairwiseLabel(antigen_id=antigen_id, antibody_j=j, antibody_k=k, ddg=ddg, y=int(ddg > 0))
            )
    return labels


def predicted_margins(scorer: PairScorer, labels: TypingSequence[PairwiseLabel]) -> torch.Tensor:
    """ΔĜ(i, j) - ΔĜ(i, k) for every label."""
    if not labels:
        return torch.empty(0, dtype=torch.float64)
    antigen_ids = [l.antigen_id for l in labels]
    scorer.prefetch(
        [(l.antigen_id, l.antibody_j) for l in labels] + [(l.antigen_id, l.antibody_k) for l in labels]
    )
    score_j = scorer.predict(antigen_ids, [l.antibody_j for l in labels])
    score_k = scorer.predict(antigen_ids, [l.antibody_k for l in labels])
    return score_j - score_k


def predict_pair_label(scorer: PairScorer, label: PairwiseLabel) -> Tuple[int, float]:
    """(Ŷ, margin): Ŷ = 1 iff ΔĜ(i, j) - ΔĜ(i, k) > 0, strictly."""
    margin = float(predicted_margins(scorer, [label])[0])
    return int(margin > 0), margin


def consensus_filter(teacher: PairScorer, labels: TypingSequence[PairwiseLabel]) -> ConsensusReport:
    """Keeps the labels whose sign the teacher predicts; an empty input has agreement 0."""
    if not labels:
        return ConsensusReport(kept=[], dropped=[], agreement_rate=0.0)
    predicted = (predicted_margins(teacher, labels) > 0).to(torch.long)
    kept, dropped = [], []
    for label, y_hat in zip(labels, predicted.tolist()):
        (kept if y_hat == label.y else dropped).append(label)
    return ConsensusReport(kept=kept, dropped=dropped, agreement_rate=len(kept) / len(labels))


def save_pairs(labels: TypingSequence[PairwiseLabel], path):
    frame = pd.DataFrame(
        [(l.antigen_id, l.antibody_j, l.antibody_k, l.ddg, l.y) for l in labels],
        columns=["i", "j", "k", "ddg", "y"],
    )
    write_csv(frame, path)


def load_pairs(path) -> List[PairwiseLabel]:
    frame = read_csv(path)
    return [
        PairwiseLabel(antigen_id=int(r.i), antibody_j=int(r.j), antibody_k=int(r.k), ddg=float(r.ddg), y=int(r.y))
        for r in frame.itertuples(index=False)
    ]
