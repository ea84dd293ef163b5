"""
Differentiable binding-energy estimators: f_alpha reads sequences, f_beta reads a complex
structure around the CDR. Both are exposed to training code through PairScorer adapters that
score (antigen id, antibody id) pairs from a dataset.
"""

import math
from typing import Dict, List, Optional, Sequence as TypingSequence, Tuple

import torch
import torch.nn as nn
from loguru import logger

from affinity_lab.data.dataset import ToyDataset
from affinity_lab.models.layers import (
    gather_points,
    knn_antigen,
    local_bond_vectors,
    mlp,
    rbf,
    safe_norm,
)
from affinity_lab.protocol import LabeledPair
from affinity_lab.utils.config import TrainConfig
from affinity_lab.utils.optimizer import train_epochs
from affinity_lab.utils.progress_tracker import LossCurve
from affinity_lab.world.oracle import DTYPE
from affinity_lab.world.sequences import NUM_RESIDUE_TYPES, ComplexLayout, Sequence


class SeqPredictor(nn.Module):
    """
    Antibody = mean-pooled embedding ⧺ embeddings at the CDR positions; antigen = mean-pooled
    embedding. The concatenation feeds a three-layer MLP.
    """

    def __init__(self, cdr_positions: TypingSequence[int], hidden_dim: int = 64, embed_dim: int = 16):
        super().__init__()
        self.cdr_positions = tuple(int(p) for p in cdr_positions)
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.embedding = nn.Embedding(NUM_RESIDUE_TYPES, embed_dim)
        self.net = mlp((2 + len(self.cdr_positions)) * embed_dim, hidden_dim, 1)
        self.double()

    def architecture(self) -> Dict:
        return {
            "cdr_positions": list(self.cdr_positions),
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
        }

    def forward(self, antibody: torch.LongTensor, antigen: torch.LongTensor) -> torch.Tensor:
        ab = self.embedding(antibody)
        ag = self.embedding(antigen)
        cdr = ab[:, list(self.cdr_positions)].flatten(1)
        h = torch.cat([ab.mean(1), cdr, ag.mean(1)], dim=-1)
        return self.net(h).squeeze(-1)


class StructPredictor(nn.Module):
    """
    Per CDR residue: its type embedding, its bonds to CDR neighbours, and for each of its k
    nearest antigen residues the distance, a radial-basis expansion of it and the neighbour's
    type embedding. The flattened CDR features feed a three-layer MLP.
    """

    def __init__(
        self,
        num_cdr: int,
        hidden_dim: int = 64,
        embed_dim: int = 16,
        num_neighbors: int = 8,
        num_rbf: int = 8,
        rbf_max: float = 8.0,
    ):
        super().__init__()
        self.num_cdr = num_cdr
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.num_neighbors = num_neighbors
        self.num_rbf = num_rbf
        self.rbf_max = rbf_max
        self.embedding = nn.Embedding(NUM_RESIDUE_TYPES, embed_dim)
        per_residue = embed_dim + 6 + num_neighbors * (1 + num_rbf + embed_dim)
        self.net = mlp(num_cdr * per_residue, hidden_dim, 1)
        self.double()

    def architecture(self) -> Dict:
        return {
            "num_cdr": self.num_cdr,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "num_neighbors": self.num_neighbors,
            "num_rbf": self.num_rbf,
            "rbf_max": self.rbf_max,
        }

    def featurize(
        self, x: torch.Tensor, indices: torch.LongTensor, layout: ComplexLayout
    ) -> Tuple[torch.Tensor, int]:
        """x (B, N, 3), indices (B, N) -> features (B, C, F) and the k-NN tie count."""
        cdr, antigen = layout.cdr_global, layout.antigen_global
        if len(cdr) != self.num_cdr:
            raise ValueError(f"predictor built for {self.num_cdr} CDR residues, layout has {len(cdr)}")
        if len(antigen) < self.num_neighbors:
            raise ValueError(
                f"antigen of length {len(antigen)} has fewer than {self.num_neighbors} residues"
            )
        neighbors, ties = knn_antigen(x, cdr, antigen, self.num_neighbors)
        centre = x[:, list(cdr)]
        d = safe_norm(gather_points(x, neighbors) - centre.unsqueeze(2))
        neighbor_types = self.embedding(torch.gather(indices, 1, neighbors.flatten(1)))
        neighbor_types = neighbor_types.reshape(*neighbors.shape, self.embed_dim)
        per_neighbor = torch.cat(
            [d.unsqueeze(-1), rbf(d, self.num_rbf, self.rbf_max), neighbor_types], dim=-1
        )
        features = torch.cat(
            [
                self.embedding(indices[:, list(cdr)]),
                local_bond_vectors(x, cdr),
                per_neighbor.flatten(2),
            ],
            dim=-1,
        )
        return features, ties

    def forward(
        self, x: torch.Tensor, indices: torch.LongTensor, layout: ComplexLayout
    ) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if indices.dim() == 1:
            indices = indices.expand(x.shape[0], -1)
        features, _ = self.featurize(x, indices, layout)
        out = self.net(features.flatten(1)).squeeze(-1)
        return out[0] if squeeze else out


def predict_seq(f_alpha: SeqPredictor, ab: Sequence, ag: Sequence) -> float:
    with torch.no_grad():
        return float(f_alpha(ab.encode()[None], ag.encode()[None])[0])


def score_sequences(f_alpha: SeqPredictor, antibodies: TypingSequence[Sequence], ag: Sequence) -> torch.Tensor:
    with torch.no_grad():
        ab = torch.stack([s.encode() for s in antibodies])
        return f_alpha(ab, ag.encode().expand(len(antibodies), -1))


def _check_length(x: torch.Tensor, layout: ComplexLayout):
    if x.shape[-2] != layout.global_length:
        raise ValueError(
            f"structure has {x.shape[-2]} residues, layout expects {layout.global_length}"
        )


def predict_struct(f_beta: StructPredictor, x: torch.Tensor, seq: Sequence, layout: ComplexLayout) -> float:
    _check_length(x, layout)
    with torch.no_grad():
        return float(f_beta(x, seq.encode(), layout))


def grad_struct(
    f_beta: StructPredictor,
    x: torch.Tensor,
    seq: Sequence,
    layout: ComplexLayout,
    diagnostics: Optional[Dict] = None,
) -> torch.Tensor:
    """
    ∂f_beta/∂x by backpropagation, same shape as x ((N, 3) or (B, N, 3); batched entries are
    independent). Rows outside the CDR residues and their k nearest antigen residues are zero.
    """
    _check_length(x, layout)
    squeeze = x.dim() == 2
    xb = (x.unsqueeze(0) if squeeze else x).detach().clone().requires_grad_(True)
    indices = seq.encode().expand(xb.shape[0], -1)
    with torch.enable_grad():
        features, ties = f_beta.featurize(xb, indices, layout)
        out = f_beta.net(features.flatten(1)).sum()
        (grad,) = torch.autograd.grad(out, xb)
    if ties:
        logger.warning(f"{ties} k-NN distance ties resolved by antigen index order")
    if diagnostics is not None:
        diagnostics["knn_ties"] = diagnostics.get("knn_ties", 0) + ties
    if not torch.isfinite(grad).all():
        raise ValueError("structure predictor produced a non-finite gradient")
    return grad[0] if squeeze else grad


class PairScorer:
    """Differentiable ΔĜ for (antigen id, antibody id) pairs of a dataset."""

    name = "scorer"

    def __init__(self, model: nn.Module, dataset: ToyDataset):
        self.model = model
        self.dataset = dataset

    def score(self, antigen_ids: TypingSequence[int], antibody_ids: TypingSequence[int]) -> torch.Tensor:
        raise NotImplementedError

    def predict(self, antigen_ids: TypingSequence[int], antibody_ids: TypingSequence[int]) -> torch.Tensor:
        with torch.no_grad():
            return self.score(antigen_ids, antibody_ids)

    def prefetch(self, pairs: TypingSequence[Tuple[int, int]]):
        pass


class SeqScorer(PairScorer):
    name = "seq"

    def score(self, antigen_ids, antibody_ids):
        registry = self.dataset.registry
        ab = torch.stack([registry.antibody(int(j)).encode() for j in antibody_ids])
        ag = torch.stack([registry.antigen(int(i)).encode() for i in antigen_ids])
        return self.model(ab, ag)


class StructScorer(PairScorer):
    """Scores docked structures; docking is computed once per pair and cached."""

    name = "struct"

    def __init__(self, model: StructPredictor, dataset: ToyDataset):
        super().__init__(model, dataset)
        self._docked: Dict[Tuple[int, int], torch.Tensor] = {}
        self._indices: Dict[Tuple[int, int], torch.LongTensor] = {}

    def _structure(self, antigen_id: int, antibody_id: int):
        key = (antigen_id, antibody_id)
        if key not in self._docked:
            self._docked[key] = self.dataset.docked(antigen_id, antibody_id)
            layout = self.dataset.layout(antigen_id, self.dataset.registry.antibody(antibody_id))
            self._indices[key] = layout.complex_sequence().encode()
        return self._docked[key], self._indices[key]

    def prefetch(self, pairs: TypingSequence[Tuple[int, int]]):
        missing = sorted({(int(i), int(j)) for i, j in pairs} - set(self._docked))
        if not missing:
            return
        for key, x in zip(missing, self.dataset.docked_many(missing)):
            self._docked[key] = x
            layout = self.dataset.layout(key[0], self.dataset.registry.antibody(key[1]))
            self._indices[key] = layout.complex_sequence().encode()

    def score(self, antigen_ids, antibody_ids):
        pairs = [(int(i), int(j)) for i, j in zip(antigen_ids, antibody_ids)]
        if not pairs:
            return torch.empty(0, dtype=DTYPE)
        xs, idx = zip(*(self._structure(i, j) for i, j in pairs))
        # Every complex of a dataset shares one layout geometry.
        return self.model(torch.stack(xs), torch.stack(idx), self.dataset.layout(pairs[0][0]))


def split_by_antigen(
    labeled: TypingSequence[LabeledPair], fraction: float, rng: torch.Generator
) -> Tuple[List[LabeledPair], List[LabeledPair]]:
    """Holds out `fraction` of the labelled antigens (at least one antigen is kept for training)."""
    antigens = sorted({l.antigen_id for l in labeled})
    num_val = min(int(math.floor(fraction * len(antigens))), len(antigens) - 1)
    if num_val <= 0:
        return list(labeled), []
    order = torch.randperm(len(antigens), generator=rng)
    val_antigens = {antigens[int(i)] for i in order[:num_val]}
    train = [l for l in labeled if l.antigen_id not in val_antigens]
    val = [l for l in labeled if l.antigen_id in val_antigens]
    return train, val


def supervised_train(
    scorer: PairScorer,
    labeled: TypingSequence[LabeledPair],
    train_cfg: TrainConfig,
    rng: torch.Generator,
    validation_fraction: float = 0.0,
    wandb_run=None,
) -> Tuple[PairScorer, LossCurve]:
    """Mean squared error of ΔĜ against the exact labels."""
    if len(labeled) == 0:
        raise ValueError("supervised training needs at least one label")
    train, val = split_by_antigen(labeled, validation_fraction, rng)
    antigen_ids = [l.antigen_id for l in train]
    antibody_ids = [l.antibody_id for l in train]
    targets = torch.tensor([l.delta_g for l in train], dtype=DTYPE)

    def batch_loss(batch: torch.LongTensor, gen: torch.Generator) -> torch.Tensor:
        ids = batch.tolist()
        pred = scorer.score([antigen_ids[i] for i in ids], [antibody_ids[i] for i in ids])
        return ((pred - targets[batch]) ** 2).mean()

    stage = f"{scorer.name}_supervised"
    curve = train_epochs(scorer.model, len(train), batch_loss, train_cfg, rng, stage, wandb_run)
    if val:
        pred = scorer.predict([l.antigen_id for l in val], [l.antibody_id for l in val])
        target = torch.tensor([l.delta_g for l in val], dtype=DTYPE)
        logger.info(
            f"{stage}: validation MSE {float(((pred - target) ** 2).mean()):.6g} on {len(val)} labels"
        )
    return scorer, curve
