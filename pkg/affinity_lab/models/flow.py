"""
Conditional flow matching over complex structures. Time runs from the harmonic prior at t=0
to data at t=1 along straight paths; the network predicts the clean endpoint x̂1.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence as TypingSequence, Tuple, Union

import torch
import torch.nn as nn

from affinity_lab.utils.config import TrainConfig
from affinity_lab.utils.exceptions import SamplingError
from affinity_lab.utils.optimizer import train_epochs
from affinity_lab.utils.progress_tracker import LossCurve
from affinity_lab.models.layers import mlp, sinusoidal_embedding
from affinity_lab.world.oracle import DTYPE
from affinity_lab.world.sequences import NUM_RESIDUE_TYPES, Sequence

VectorField = Callable[[torch.Tensor, float], torch.Tensor]

STANDARD_SCHEDULES: Dict[int, List[float]] = {
    1: [1.0, 0.0],
    2: [1.0, 0.5, 0.0],
    3: [1.0, 0.6, 0.3, 0.0],
    4: [1.0, 0.75, 0.5, 0.25, 0.0],
}


@dataclass(frozen=True)
class HarmonicPriorSpec:
    chain_length: int
    stiffness: float

    def __post_init__(self):
        if self.chain_length < 2:
            raise ValueError(f"harmonic prior needs chain_length >= 2, got {self.chain_length}")
        if not self.stiffness > 0:
            raise ValueError(f"stiffness must be positive, got {self.stiffness}")


def harmonic_prior_sample(
    spec: HarmonicPriorSpec, rng: torch.Generator, num_samples: Optional[int] = None
) -> torch.Tensor:
    """Independent Normal(0, I/κ) bonds, summed along the chain and centred."""
    shape = (num_samples or 1, spec.chain_length - 1, 3)
    bonds = torch.randn(shape, generator=rng, dtype=DTYPE) / spec.stiffness**0.5
    x = torch.cat([torch.zeros(shape[0], 1, 3, dtype=DTYPE), bonds.cumsum(1)], dim=1)
    x = x - x.mean(1, keepdim=True)
    return x if num_samples is not None else x[0]


def _time_like(t: Union[float, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.dim() == 0:
        return t
    return t.reshape(-1, *([1] * (x.dim() - 1)))


def _check_below_one(t: Union[float, torch.Tensor]):
    if bool((torch.as_tensor(t) >= 1.0).any()):
        raise ValueError("vector field is undefined at t = 1")


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: Union[float, torch.Tensor]) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = _time_like(t, x0)
    return (1 - t) * x0 + t * x1


def conditional_vector_field(
    x: torch.Tensor, x1: torch.Tensor, t: Union[float, torch.Tensor]
) -> torch.Tensor:
    _check_below_one(t)
    if x.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x1.shape)}")
    return (x1 - x) / (1 - _time_like(t, x))


class FlowModel(nn.Module):
    """
    Per-residue x̂1 denoiser. Each residue sees its noisy coordinate, the time, its type, its
    chain index and the mean-pooled type embedding of the whole complex.
    """

    def __init__(self, hidden_dim: int = 128, embed_dim: int = 16, time_embed_dim: int = 16):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.time_embed_dim = time_embed_dim
        self.type_embedding = nn.Embedding(NUM_RESIDUE_TYPES, embed_dim)
        self.net = mlp(3 + time_embed_dim + 3 * embed_dim, hidden_dim, 3)
        self.double()

    def architecture(self) -> Dict[str, int]:
        return {
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "time_embed_dim": self.time_embed_dim,
        }

    def forward(
        self, x: torch.Tensor, t: Union[float, torch.Tensor], indices: torch.LongTensor
    ) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        batch, length, _ = x.shape
        if indices.dim() == 1:
            indices = indices.expand(batch, -1)

        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(batch)
        t_emb = sinusoidal_embedding(1000.0 * t, self.time_embed_dim, max_period=1000.0)
        types = self.type_embedding(indices)
        context = types.mean(1, keepdim=True).expand(-1, length, -1)
        position = sinusoidal_embedding(
            torch.arange(length, dtype=DTYPE), self.embed_dim
        ).expand(batch, -1, -1)

        h = torch.cat(
            [x, t_emb[:, None, :].expand(-1, length, -1), types, position, context], dim=-1
        )
        out = self.net(h)
        return out[0] if squeeze else out


def _indices(seq: Union[Sequence, torch.LongTensor]) -> torch.LongTensor:
    return seq.encode() if isinstance(seq, Sequence) else seq


def model_vector_field(
    model: FlowModel,
    x: torch.Tensor,
    t: Union[float, torch.Tensor],
    seq: Union[Sequence, torch.LongTensor],
) -> torch.Tensor:
    """v̂ = (x̂1(x, t) - x) / (1 - t)."""
    _check_below_one(t)
    x1_hat = model(x, t, _indices(seq))
    return (x1_hat - x) / (1 - _time_like(t, x))


def train_flow(
    model: FlowModel,
    dataset: TypingSequence[Tuple[Sequence, torch.Tensor]],
    train_cfg: TrainConfig,
    rng: torch.Generator,
    stiffness: float = 3.0,
    wandb_run=None,
) -> Tuple[FlowModel, LossCurve]:
    """
    Minimises E ||x̂1(x_t, t) - x1||^2 with t ~ U(0, 1) and x0 from the harmonic prior.
    Every (seq, x1) pair must share one chain length.
    """
    if len(dataset) == 0:
        raise ValueError("flow training needs a nonempty dataset")
    indices = torch.stack([seq.encode() for seq, _ in dataset])
    targets = torch.stack([x1 for _, x1 in dataset]).to(DTYPE)
    spec = HarmonicPriorSpec(targets.shape[1], stiffness)

    def batch_loss(batch: torch.LongTensor, gen: torch.Generator) -> torch.Tensor:
        x1 = targets[batch]
        t = torch.rand(len(batch), generator=gen, dtype=DTYPE)
        x0 = harmonic_prior_sample(spec, gen, len(batch))
        xt = interpolate(x0, x1, t)
        pred = model(xt, t, indices[batch])
        return ((pred - x1) ** 2).sum(-1).mean()

    curve = train_epochs(model, len(dataset), batch_loss, train_cfg, rng, "flow", wandb_run)
    return model, curve


def schedule_times(schedule: TypingSequence[float], interpretation: str = "noise") -> List[float]:
    """
    Flow times visited by the sampler. Noise levels s map to t = 1 - s; under the "time"
    reading the levels are used as times, visited in ascending order.
    """
    if interpretation == "noise":
        return [1.0 - s for s in schedule]
    if interpretation == "time":
        return sorted(schedule)
    raise ValueError(f"unknown schedule interpretation {interpretation!r}")


def schedule_for_steps(steps: int) -> List[float]:
    if steps in STANDARD_SCHEDULES:
        return list(STANDARD_SCHEDULES[steps])
    if steps < 1:
        raise ValueError(f"need at least one sampling step, got {steps}")
    return [1.0 - k / steps for k in range(steps)] + [0.0]


@dataclass
class Trajectory:
    times: List[float] = field(default_factory=list)
    states: List[torch.Tensor] = field(default_factory=list)

    def append(self, t: float, x: torch.Tensor):
        self.times.append(t)
        self.states.append(x)

    @property
    def num_steps(self) -> int:
        return max(len(self.times) - 1, 0)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


def sample_ode(
    model: Optional[FlowModel],
    seq: Union[Sequence, torch.LongTensor],
    schedule: TypingSequence[float],
    rng: torch.Generator,
    field_override: Optional[VectorField] = None,
    interpretation: str = "noise",
    stiffness: float = 3.0,
    num_samples: Optional[int] = None,
) -> Tuple[torch.Tensor, Trajectory]:
    """
    Euler integration from a harmonic prior draw across the schedule knots. Returns the final
    structure and the (t, x_t) trajectory, which holds one more state than Euler steps.
    """
    if len(schedule) < 2 or any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must hold at least two strictly decreasing levels")
    indices = _indices(seq)
    times = schedule_times(schedule, interpretation)
    field_fn = field_override or (lambda x, t: model_vector_field(model, x, t, indices))

    x = harmonic_prior_sample(HarmonicPriorSpec(len(indices), stiffness), rng, num_samples)
    trajectory = Trajectory()
    trajectory.append(times[0], x)
    with torch.no_grad():
        for step, (t, t_next) in enumerate(zip(times, times[1:])):
            x = x + (t_next - t) * field_fn(x, t)
            if not torch.isfinite(x).all():
                raise SamplingError(step, t)
            trajectory.append(t_next, x)
    return x, trajectory
