"""
Ground truth of the toy world: a deterministic fold for every sequence, a smooth conformational
ensemble around it, the exact contact binding energy and a noisy stand-in for docking+scoring.
"""

from typing import Optional, Sequence as TypingSequence, Tuple

import torch

from affinity_lab.protocol import EnergyRecord
from affinity_lab.utils.config import NoiseConfig
from affinity_lab.world.sequences import ComplexLayout, Sequence
from affinity_lab.world.tables import WorldTables, load_tables

DTYPE = torch.float64
DEFAULT_CONTACT_RANGE = 2.0
SMOOTHING_WINDOW = 5

# A Structure is an (N, 3) float64 tensor, optionally with leading batch dimensions.
Structure = torch.Tensor


def window_turns(indices: torch.LongTensor, tables: WorldTables) -> torch.Tensor:
    """Per interior residue (bend, torsion), averaged over the window {i-1, i, i+1}."""
    per_residue = tables.angles[indices]
    return (per_residue[..., :-2, :] + per_residue[..., 1:-1, :] + per_residue[..., 2:, :]) / 3.0


def fold_batch(indices: torch.LongTensor, tables: Optional[WorldTables] = None) -> torch.Tensor:
    """
    Folds a (B, N) batch of residue indices into (B, N, 3) unit-step curves.

    The moving frame (t, n, b) is updated in its own coordinates, so changing an angle at
    residue i moves every later point by one rigid transformation.
    """
    tables = tables or load_tables()
    batch, length = indices.shape
    coords = torch.zeros(batch, length, 3, dtype=DTYPE)
    if length == 1:
        return coords

    turns = window_turns(indices, tables) if length > 2 else None
    eye = torch.eye(3, dtype=DTYPE)
    t, n, b = (eye[k].expand(batch, 3).clone() for k in range(3))

    for i in range(1, length):
        coords[:, i] = coords[:, i - 1] + t
        if i > length - 2:
            continue
        bend = turns[:, i - 1, 0:1]
        torsion = turns[:, i - 1, 1:2]
        n_twisted = torch.cos(torsion) * n + torch.sin(torsion) * b
        t_new = torch.cos(bend) * t + torch.sin(bend) * n_twisted
        n_new = torch.cos(bend) * n_twisted - torch.sin(bend) * t
        t = t_new / t_new.norm(dim=-1, keepdim=True)
        n_new = n_new - (n_new * t).sum(-1, keepdim=True) * t
        n = n_new / n_new.norm(dim=-1, keepdim=True)
        b = torch.linalg.cross(t, n)
    return coords


def oracle_mean_structure(seq: Sequence, tables: Optional[WorldTables] = None) -> Structure:
    return fold_batch(seq.encode().unsqueeze(0), tables)[0]


def smooth_noise(
    length: int, rng: torch.Generator, num_samples: Optional[int] = None
) -> torch.Tensor:
    """i.i.d. Gaussians along the chain passed through a 5-point moving average."""
    shape = (num_samples or 1, length + SMOOTHING_WINDOW - 1, 3)
    raw = torch.randn(shape, generator=rng, dtype=DTYPE)
    smooth = raw.unfold(1, SMOOTHING_WINDOW, 1).mean(-1)
    return smooth if num_samples is not None else smooth[0]


def oracle_ensemble_sample(
    seq: Sequence,
    fluctuation_scale: float,
    rng: torch.Generator,
    tables: Optional[WorldTables] = None,
    num_samples: Optional[int] = None,
    mean: Optional[Structure] = None,
) -> Structure:
    """
    Mean structure plus `fluctuation_scale` times smoothed noise. With `num_samples` set the
    result is (S, N, 3). A precomputed `mean` skips refolding.
    """
    if fluctuation_scale < 0:
        raise ValueError(f"fluctuation_scale must be >= 0, got {fluctuation_scale}")
    mean = oracle_mean_structure(seq, tables) if mean is None else mean
    if num_samples is not None:
        mean = mean.expand(num_samples, *mean.shape)
    if fluctuation_scale == 0:
        return mean.clone()
    return mean + fluctuation_scale * smooth_noise(len(seq), rng, num_samples)


def contact_energy(
    x: Structure,
    complex_indices: torch.LongTensor,
    layout: ComplexLayout,
    tables: Optional[WorldTables] = None,
    contact_range: float = DEFAULT_CONTACT_RANGE,
) -> torch.Tensor:
    """
    Sum over (CDR residue p, antigen residue q) of w(p, q) * exp(-d_pq^2 / 2 sigma_c^2).
    `complex_indices` is (N,) or (B, N) matching the leading dimensions of `x`.
    """
    tables = tables or load_tables()
    cdr = list(layout.cdr_global)
    antigen = list(layout.antigen_global)
    diff = x[..., cdr, None, :] - x[..., None, antigen, :]
    d2 = (diff**2).sum(-1)
    cdr_types = complex_indices[..., cdr]
    antigen_types = complex_indices[..., antigen]
    w = tables.interaction[cdr_types[..., :, None], antigen_types[..., None, :]]
    return (w * torch.exp(-d2 / (2.0 * contact_range**2))).sum((-1, -2))


def complex_indices(ab: Sequence, ag: Sequence, layout: ComplexLayout) -> torch.LongTensor:
    return layout.with_antibody(ab).with_antigen(ag).complex_sequence().encode()


def oracle_binding_energy(
    ab: Sequence,
    ag: Sequence,
    layout: ComplexLayout,
    tables: Optional[WorldTables] = None,
    contact_range: float = DEFAULT_CONTACT_RANGE,
) -> float:
    tables = tables or load_tables()
    indices = complex_indices(ab, ag, layout)
    x = fold_batch(indices.unsqueeze(0), tables)[0]
    return float(contact_energy(x, indices, layout, tables, contact_range))


def oracle_binding_energies(
    antibodies: TypingSequence[Sequence],
    ag: Sequence,
    layout: ComplexLayout,
    tables: Optional[WorldTables] = None,
    contact_range: float = DEFAULT_CONTACT_RANGE,
) -> torch.Tensor:
    """Vectorised oracle_binding_energy over antibodies sharing one antigen and layout."""
    tables = tables or load_tables()
    indices = torch.stack([complex_indices(ab, ag, layout) for ab in antibodies])
    x = fold_batch(indices, tables)
    return contact_energy(x, indices, layout, tables, contact_range)


def apply_noise(
    delta_g: torch.Tensor, noise_cfg: NoiseConfig, rng: torch.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Returns (noisy energies, outlier flags). Every record consumes the same three draws whether
    or not it becomes an outlier.
    """
    shape = delta_g.shape
    selector = torch.rand(shape, generator=rng, dtype=DTYPE)
    gaussian = torch.randn(shape, generator=rng, dtype=DTYPE)
    uniform = 2.0 * torch.rand(shape, generator=rng, dtype=DTYPE) - 1.0
    is_outlier = selector < noise_cfg.outlier_rate
    noisy = torch.where(
        is_outlier,
        delta_g + noise_cfg.magnitude * uniform,
        delta_g + noise_cfg.gaussian_sigma * gaussian,
    )
    return noisy, is_outlier


def noisy_binding_energy(
    ab: Sequence,
    ag: Sequence,
    layout: ComplexLayout,
    noise_cfg: NoiseConfig,
    rng: torch.Generator,
    antigen_id: int = 0,
    antibody_id: int = 0,
    tables: Optional[WorldTables] = None,
    contact_range: float = DEFAULT_CONTACT_RANGE,
) -> EnergyRecord:
    delta_g = oracle_binding_energy(ab, ag, layout, tables, contact_range)
    noisy, is_outlier = apply_noise(torch.tensor([delta_g], dtype=DTYPE), noise_cfg, rng)
    return EnergyRecord(
        antigen_id=antigen_id,
        antibody_id=antibody_id,
        delta_g=delta_g,
        delta_g_noisy=float(noisy[0]),
        is_outlier=bool(is_outlier[0]),
    )


def docked_structure(
    ab: Sequence,
    ag: Sequence,
    layout: ComplexLayout,
    rng: torch.Generator,
    docking_fluctuation: float,
    tables: Optional[WorldTables] = None,
) -> Structure:
    """A centred ensemble draw of the complex, standing in for a docking pose."""
    seq = layout.with_antibody(ab).with_antigen(ag).complex_sequence()
    x = oracle_ensemble_sample(seq, docking_fluctuation, rng, tables)
    return x - x.mean(0, keepdim=True)
