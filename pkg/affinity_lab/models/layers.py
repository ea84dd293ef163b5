import math
from typing import Tuple

import torch
import torch.nn as nn


def sinusoidal_embedding(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style sin/cos features of `values`; output shape values.shape + (dim,)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    args = values.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def mlp(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    """Three fully connected layers with SiLU in between."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim),
        nn.SiLU(),
        nn.Linear(hidden_dim, hidden_dim),
        nn.SiLU(),
        nn.Linear(hidden_dim, out_dim),
    )


def rbf(distances: torch.Tensor, num_rbf: int, max_distance: float) -> torch.Tensor:
    centers = torch.linspace(0.0, max_distance, num_rbf, dtype=torch.float64)
    width = max_distance / max(num_rbf - 1, 1)
    return torch.exp(-(((distances.unsqueeze(-1) - centers) / width) ** 2))


def safe_norm(vectors: torch.Tensor) -> torch.Tensor:
    return torch.sqrt((vectors**2).sum(-1) + 1e-12)


def knn_antigen(
    x: torch.Tensor, cdr: Tuple[int, ...], antigen: Tuple[int, ...], k: int
) -> Tuple[torch.LongTensor, int]:
    """
    Global indices (B, C, k) of the k antigen residues nearest to each CDR residue, and the
    number of exact distance ties (within 1e-12) at or before the k-th rank. Ties resolve
    by antigen index through a stable sort.
    """
    k = min(k, len(antigen))
    with torch.no_grad():
        diff = x[..., list(cdr), None, :] - x[..., None, list(antigen), :]
        d = torch.sqrt((diff**2).sum(-1))
        d_sorted, order = torch.sort(d, dim=-1, stable=True)
        window = d_sorted[..., : min(k + 1, len(antigen))]
        ties = int((window[..., 1:] - window[..., :-1] < 1e-12).sum())
    antigen_index = torch.tensor(antigen, dtype=torch.long)
    return antigen_index[order[..., :k]], ties


def gather_points(x: torch.Tensor, index: torch.LongTensor) -> torch.Tensor:
    """x (B, N, 3), index (B, ...) -> (B, ..., 3)."""
    batch = x.shape[0]
    flat = index.reshape(batch, -1)
    picked = torch.gather(x, 1, flat.unsqueeze(-1).expand(-1, -1, 3))
    return picked.reshape(*index.shape, 3)


def local_bond_vectors(x: torch.Tensor, cdr: Tuple[int, ...]) -> torch.Tensor:
    """
    (B, C, 6): the bonds to the previous and next residue of every CDR residue, zeroed when
    that neighbour is not itself a CDR residue.
    """
    members = set(cdr)
    parts = []
    for p in cdr:
        prev = x[:, p] - x[:, p - 1] if p - 1 in members else torch.zeros_like(x[:, p])
        nxt = x[:, p + 1] - x[:, p] if p + 1 in members else torch.zeros_like(x[:, p])
        parts.append(torch.cat([prev, nxt], dim=-1))
    return torch.stack(parts, dim=1)
