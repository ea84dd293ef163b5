"""
Structure-conditioned mutation proposals and sequence-predictor post-selection.
"""

import hashlib
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence as TypingSequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from affinity_lab.data.dataset import ComplexSample
from affinity_lab.models.layers import (
    gather_points,
    knn_antigen,
    mlp,
    rbf,
    safe_norm,
)
from affinity_lab.models.predictors import SeqPredictor, score_sequences
from affinity_lab.utils.config import TrainConfig
from affinity_lab.utils.optimizer import train_epochs
from affinity_lab.utils.progress_tracker import LossCurve
from affinity_lab.world.oracle import DTYPE
from affinity_lab.world.sequences import ALPHABET, NUM_RESIDUE_TYPES, ComplexLayout, Sequence


class InverseFoldModel(nn.Module):
    """
    Per CDR position: bonds to both chain neighbours, the bend cosine, and the distance, its
    radial-basis expansion and the residue type of each of the k nearest antigen residues.
    Outputs logits over the 20 residue types; the last layer starts at zero.
    """

    def __init__(
        self,
        hidden_dim: int = 64,
        embed_dim: int = 8,
        num_neighbors: int = 8,
        num_rbf: int = 8,
        rbf_max: float = 8.0,
    ):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.num_neighbors = num_neighbors
        self.num_rbf = num_rbf
        self.rbf_max = rbf_max
        self.embedding = nn.Embedding(NUM_RESIDUE_TYPES, embed_dim)
        self.net = mlp(7 + num_neighbors * (1 + num_rbf + embed_dim), hidden_dim, NUM_RESIDUE_TYPES)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.double()

    def architecture(self) -> Dict:
        return {
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "num_neighbors": self.num_neighbors,
            "num_rbf": self.num_rbf,
            "rbf_max": self.rbf_max,
        }

    def featurize(
        self, x: torch.Tensor, indices: torch.LongTensor, layout: ComplexLayout
    ) -> torch.Tensor:
        """x (B, N, 3), indices (B, N) -> (B, C, F). The CDR residue types themselves are not read."""
        cdr, antigen = layout.cdr_global, layout.antigen_global
        last = x.shape[1] - 1
        prev = torch.stack([x[:, p] - x[:, max(p - 1, 0)] for p in cdr], dim=1)
        nxt = torch.stack([x[:, min(p + 1, last)] - x[:, p] for p in cdr], dim=1)
        bend = (prev * nxt).sum(-1) / (safe_norm(prev) * safe_norm(nxt))

        neighbors, _ = knn_antigen(x, cdr, antigen, self.num_neighbors)
        d = safe_norm(gather_points(x, neighbors) - x[:, list(cdr)].unsqueeze(2))
        types = self.embedding(torch.gather(indices, 1, neighbors.flatten(1)))
        types = types.reshape(*neighbors.shape, self.embed_dim)
        per_neighbor = torch.cat([d.unsqueeze(-1), rbf(d, self.num_rbf, self.rbf_max), types], -1)
        return torch.cat([prev, nxt, bend.unsqueeze(-1), per_neighbor.flatten(2)], dim=-1)

    def forward(self, x: torch.Tensor, indices: torch.LongTensor, layout: ComplexLayout) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if indices.dim() == 1:
            indices = indices.expand(x.shape[0], -1)
        logits = self.net(self.featurize(x, indices, layout))
        return logits[0] if squeeze else logits


def cdr_distribution(
    model: InverseFoldModel, x: torch.Tensor, seq: Sequence, layout: ComplexLayout
) -> torch.Tensor:
    """(C, 20) residue-type probabilities at the CDR positions of one complex."""
    with torch.no_grad():
        return torch.softmax(model(x, seq.encode(), layout), dim=-1)


def train_if(
    model: InverseFoldModel,
    corpus: TypingSequence[ComplexSample],
    train_cfg: TrainConfig,
    rng: torch.Generator,
    heldout: TypingSequence[ComplexSample] = (),
    wandb_run=None,
) -> Tuple[InverseFoldModel, LossCurve]:
    """Cross-entropy of the true CDR residue given its local structure."""
    if len(corpus) == 0:
        raise ValueError("inverse folding needs a nonempty corpus")
    layout = corpus[0].layout
    coords = torch.stack([s.coords for s in corpus])
    indices = torch.stack([s.sequence.encode() for s in corpus])
    targets = indices[:, list(layout.cdr_global)]

    def batch_loss(batch: torch.LongTensor, gen: torch.Generator) -> torch.Tensor:
        logits = model(coords[batch], indices[batch], layout)
        return F.cross_entropy(logits.reshape(-1, NUM_RESIDUE_TYPES), targets[batch].reshape(-1))

    curve = train_epochs(model, len(corpus), batch_loss, train_cfg, rng, "inverse_fold", wandb_run)
    if heldout:
        logger.info(f"inverse_fold: held-out top-1 accuracy {if_accuracy(model, heldout):.3f}")
    return model, curve


def if_accuracy(model: InverseFoldModel, samples: TypingSequence[ComplexSample]) -> float:
    layout = samples[0].layout
    coords = torch.stack([s.coords for s in samples])
    indices = torch.stack([s.sequence.encode() for s in samples])
    with torch.no_grad():
        predicted = model(coords, indices, layout).argmax(-1)
    return float((predicted == indices[:, list(layout.cdr_global)]).to(DTYPE).mean())


@dataclass(frozen=True)
class MutationProposal:
    sequence: Sequence
    parent: Sequence
    arity: int
    positions: Tuple[int, ...]
    seq_score: Optional[float] = None

    @property
    def parent_hash(self) -> str:
        return hashlib.blake2b(str(self.parent).encode(), digest_size=8).hexdigest()

    def describe(self) -> str:
        return ";".join(f"{self.parent.residues[p]}{p}{self.sequence.residues[p]}" for p in self.positions)


def position_weights(probs: torch.Tensor, weighting: str) -> torch.Tensor:
    if weighting == "uniform":
        return torch.ones(probs.shape[0], dtype=DTYPE)
    if weighting != "entropy":
        raise ValueError(f"unknown position weighting {weighting!r}")
    entropy = -(probs * torch.log(probs.clamp_min(1e-300))).sum(-1)
    return entropy.clamp_min(1e-12)


def propose_mutations(
    if_model: InverseFoldModel,
    x: torch.Tensor,
    seq: Sequence,
    layout: ComplexLayout,
    arities: TypingSequence[int],
    per_arity: int,
    rng: torch.Generator,
    weighting: str = "entropy",
) -> List[MutationProposal]:
    """
    `seq` is the full complex; proposals mutate the antibody at CDR positions only. Residues are
    sampled from the classifier with the current residue excluded; duplicates are dropped.
    """
    if per_arity < 1:
        raise ValueError(f"per_arity must be >= 1, got {per_arity}")
    cdr = layout.cdr_positions
    for arity in arities:
        if arity > len(cdr):
            raise ValueError(f"mutation arity {arity} exceeds {len(cdr)} CDR positions")

    probs = cdr_distribution(if_model, x, seq, layout)
    weights = position_weights(probs, weighting)
    parent = layout.antibody
    current = torch.tensor([ALPHABET.index(parent.residues[p]) for p in cdr])
    allowed = probs.clone()
    allowed[torch.arange(len(cdr)), current] = 0.0
    empty = allowed.sum(-1) <= 0
    allowed[empty] = 1.0
    allowed[empty, current[empty]] = 0.0

    proposals, seen = [], set()
    for arity in arities:
        for _ in range(per_arity):
            slots = torch.multinomial(weights, arity, replacement=False, generator=rng)
            slots = sorted(int(s) for s in slots)
            changes = {}
            for s in slots:
                residue = int(torch.multinomial(allowed[s], 1, generator=rng))
                changes[cdr[s]] = ALPHABET[residue]
            mutant = parent.mutate(changes)
            if mutant.residues in seen:
                continue
            seen.add(mutant.residues)
            proposals.append(
                MutationProposal(
                    sequence=mutant,
                    parent=parent,
                    arity=arity,
                    positions=tuple(cdr[s] for s in slots),
                )
            )
    return proposals


def rank_proposals(
    f_alpha: SeqPredictor, proposals: TypingSequence[MutationProposal], antigen: Sequence
) -> List[MutationProposal]:
    """Every proposal scored by f_alpha, best (lowest ΔĜ) first; ties by (arity, sequence)."""
    if not proposals:
        raise ValueError("post_select needs at least one proposal")
    scores = score_sequences(f_alpha, [p.sequence for p in proposals], antigen)
    scored = [replace(p, seq_score=float(s)) for p, s in zip(proposals, scores)]
    scored.sort(key=lambda p: (p.seq_score, p.arity, p.sequence.residues))
    return scored


def post_select(
    f_alpha: SeqPredictor, proposals: TypingSequence[MutationProposal], antigen: Sequence, top_m: int
) -> List[MutationProposal]:
    if top_m < 1:
        raise ValueError(f"top_m must be >= 1, got {top_m}")
    return rank_proposals(f_alpha, proposals, antigen)[:top_m]
