from typing import List, Optional

import torch

from affinity_lab.utils.config import RelaxConfig
from affinity_lab.world.oracle import DTYPE

COINCIDENT_SHIFT = 1e-6
MIN_DECREASE = 1e-9


def physical_energy(x: torch.Tensor, cfg: RelaxConfig) -> torch.Tensor:
    """
    bond_weight * sum (|x_{i+1} - x_i| - 1)^2 + clash_weight * sum_{|i-j|>1} relu(r - d_ij)^2
    for an (N, 3) structure.
    """
    bonds = torch.sqrt(((x[1:] - x[:-1]) ** 2).sum(-1) + 1e-30)
    energy = cfg.bond_weight * ((bonds - 1.0) ** 2).sum()
    n = x.shape[0]
    if n > 2:
        i, j = torch.triu_indices(n, n, offset=2)
        d = torch.sqrt(((x[i] - x[j]) ** 2).sum(-1) + 1e-30)
        energy = energy + cfg.clash_weight * (torch.relu(cfg.clash_radius - d) ** 2).sum()
    return energy


def separate_coincident(x: torch.Tensor) -> torch.Tensor:
    """Moves the later residue of every exactly coincident pair by a tiny fixed offset."""
    n = x.shape[0]
    if n < 2:
        return x
    d = torch.cdist(x, x)
    i, j = torch.triu_indices(n, n, offset=1)
    hits = d[i, j] < 1e-12
    if not hits.any():
        return x
    x = x.clone()
    offset = torch.tensor([COINCIDENT_SHIFT, 0.0, 0.0], dtype=DTYPE)
    for later in sorted(set(j[hits].tolist())):
        x[later] = x[later] + later * offset
    return x


def corrector_relax(
    x: torch.Tensor,
    cfg: RelaxConfig,
    history: Optional[List[float]] = None,
) -> torch.Tensor:
    """
    Backtracking gradient descent on the bond + clash energy of an (N, 3) structure, or of each
    structure of a (B, N, 3) batch. Energies never increase between accepted iterates.
    """
    if x.dim() == 3:
        return torch.stack([corrector_relax(sample, cfg) for sample in x])

    x = separate_coincident(x.detach().to(DTYPE))
    step = cfg.step_size
    with torch.enable_grad():
        for _ in range(cfg.max_iters):
            current = x.clone().requires_grad_(True)
            energy = physical_energy(current, cfg)
            (grad,) = torch.autograd.grad(energy, current)
            energy = float(energy)
            if history is not None:
                history.append(energy)

            accepted = None
            while step > 1e-12:
                candidate = x - step * grad
                candidate_energy = float(physical_energy(candidate, cfg))
                if candidate_energy <= energy:
                    accepted = candidate
                    break
                step /= 2
            if accepted is None:
                break
            x = accepted
            if energy - candidate_energy < MIN_DECREASE:
                break
            step = min(2 * step, cfg.step_size)
    if history is not None:
        history.append(float(physical_energy(x, cfg)))
    return x
