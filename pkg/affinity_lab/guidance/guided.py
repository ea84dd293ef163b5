"""
Predictor-guided flow sampling. The guided field tilts the learned field toward lower
predicted binding energy:

    ṽ = v̂(x, t) - γ (1 - t) / t · M ∂f̂_β/∂x̂1

with the Jacobian of x̂1 with respect to x_t taken as the identity and M the CDR mask.
"""

from pathlib import Path
from typing import Optional, Sequence as TypingSequence, Union

import pandas as pd
import torch

from affinity_lab.data.dataset import write_csv
from affinity_lab.guidance.corrector import corrector_relax, physical_energy
from affinity_lab.models.flow import FlowModel, Trajectory, model_vector_field, sample_ode
from affinity_lab.models.predictors import StructPredictor, grad_struct
from affinity_lab.utils.config import GuidanceConfig, RelaxConfig
from affinity_lab.world.oracle import DTYPE
from affinity_lab.world.sequences import ComplexLayout, Sequence


def guidance_active(t: float, cfg: GuidanceConfig) -> bool:
    return cfg.gamma > 0 and t >= cfg.t_min_guidance


def guidance_coefficient(t: float, gamma: float) -> float:
    return gamma * (1.0 - t) / t


def guided_vector_field(
    model: FlowModel,
    f_beta: StructPredictor,
    x: torch.Tensor,
    t: float,
    seq: Sequence,
    layout: ComplexLayout,
    cfg: GuidanceConfig,
    relax_cfg: Optional[RelaxConfig] = None,
) -> torch.Tensor:
    """
    `seq` is the full complex. Outside the active region (γ = 0 or t < t_min_guidance) the
    result is v̂ itself. With `relax_cfg`, x̂1 is relaxed before the gradient is taken.
    """
    t = float(t)
    if t >= 1.0:
        raise ValueError("vector field is undefined at t = 1")
    with torch.no_grad():
        v_hat = model_vector_field(model, x, t, seq)
    if not guidance_active(t, cfg):
        return v_hat
    if t <= 0.0:
        raise ValueError("guidance coefficient (1 - t) / t is singular at t = 0")
    with torch.no_grad():
        x1_hat = model(x, t, seq.encode())

    target = corrector_relax(x1_hat, relax_cfg) if relax_cfg is not None else x1_hat
    grad = grad_struct(f_beta, target, seq, layout)
    if not torch.isfinite(grad).all():
        raise ValueError(f"non-finite guidance gradient at t={t:.4f}")
    if cfg.cdr_only:
        grad = grad * layout.cdr_mask(DTYPE)
    return v_hat - guidance_coefficient(t, cfg.gamma) * grad


def guided_sample(
    model: FlowModel,
    f_beta: StructPredictor,
    seq: Sequence,
    layout: ComplexLayout,
    schedule: TypingSequence[float],
    g_cfg: GuidanceConfig,
    r_cfg: Optional[RelaxConfig],
    rng: torch.Generator,
    num_samples: Optional[int] = None,
    interpretation: str = "noise",
    stiffness: float = 3.0,
    trajectory_path: Optional[Union[str, Path]] = None,
) -> torch.Tensor:
    """
    Guided ODE sampling followed by relaxation of the final structure. `r_cfg=None` turns off
    every corrector call. The step starting at t = 0 is never guided, whatever t_min_guidance.
    """

    def field(x: torch.Tensor, t: float) -> torch.Tensor:
        if t <= 0.0:
            with torch.no_grad():
                return model_vector_field(model, x, t, seq)
        return guided_vector_field(model, f_beta, x, t, seq, layout, g_cfg, r_cfg)

    x, trajectory = sample_ode(
        model,
        seq,
        schedule,
        rng,
        field_override=field,
        interpretation=interpretation,
        stiffness=stiffness,
        num_samples=num_samples,
    )
    if r_cfg is not None:
        x = corrector_relax(x, r_cfg)
    if trajectory_path is not None:
        dump_trajectory(trajectory, f_beta, seq, layout, r_cfg or RelaxConfig(), trajectory_path)
    return x


def dump_trajectory(
    trajectory: Trajectory,
    f_beta: StructPredictor,
    seq: Sequence,
    layout: ComplexLayout,
    r_cfg: RelaxConfig,
    path: Union[str, Path],
):
    rows = []
    for step, (t, x) in enumerate(zip(trajectory.times, trajectory.states)):
        batch = x if x.dim() == 3 else x.unsqueeze(0)
        with torch.no_grad():
            scores = f_beta(batch, seq.encode(), layout)
        energies = [float(physical_energy(sample, r_cfg)) for sample in batch]
        rows.append(
            {
                "step": step,
                "t": t,
                "mean_f_beta": float(scores.mean()),
                "e_phys": sum(energies) / len(energies),
            }
        )
    write_csv(pd.DataFrame(rows), path)
