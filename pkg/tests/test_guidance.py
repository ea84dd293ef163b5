import pytest
import torch

from affinity_lab.guidance import (
    corrector_relax,
    guidance_active,
    guidance_coefficient,
    guided_sample,
    guided_vector_field,
    physical_energy,
)
from affinity_lab.guidance.corrector import separate_coincident
from affinity_lab.models.flow import FlowModel, model_vector_field, sample_ode, schedule_times
from affinity_lab.models.predictors import StructPredictor, grad_struct
from affinity_lab.utils.config import GuidanceConfig, RelaxConfig

SCHEDULE = [1.0, 0.6, 0.3, 0.0]


@pytest.fixture
def models():
    torch.manual_seed(0)
    return FlowModel(16, 4, 4), StructPredictor(4, 16, 4, 4)


def test_guidance_coefficient():
    assert guidance_coefficient(0.25, 2.0) == pytest.approx(6.0)
    assert guidance_coefficient(0.5, 5.0) == pytest.approx(5.0)


def test_guidance_window():
    cfg = GuidanceConfig(gamma=5.0, t_min_guidance=0.5)
    assert not guidance_active(0.4, cfg)
    assert guidance_active(0.5, cfg)
    assert not guidance_active(0.9, GuidanceConfig(gamma=0.0))


def test_default_schedule_guides_only_its_last_step():
    steps = schedule_times(SCHEDULE)[:-1]
    assert [guidance_active(t, GuidanceConfig()) for t in steps] == [False, False, True]


@pytest.mark.parametrize("t", [0.25, 0.5, 0.9])
def test_guided_field_decomposition(models, tiny_complex, rng, t):
    flow, f_beta = models
    layout, seq = tiny_complex
    cfg = GuidanceConfig(gamma=3.0, t_min_guidance=0.0)
    x = torch.randn(layout.global_length, 3, generator=rng, dtype=torch.float64)
    guided = guided_vector_field(flow, f_beta, x, t, seq, layout, cfg)
    with torch.no_grad():
        x1_hat = flow(x, t, seq.encode())
    expected = -3.0 * (1 - t) / t * grad_struct(f_beta, x1_hat, seq, layout) * layout.cdr_mask()
    difference = guided - model_vector_field(flow, x, t, seq)
    assert torch.allclose(difference, expected, atol=1e-10)
    assert torch.all(difference[list(layout.antigen_global)] == 0.0)


def test_zero_gamma_reproduces_unguided_trajectory(models, tiny_complex):
    flow, f_beta = models
    layout, seq = tiny_complex
    gen_a, gen_b = torch.Generator(), torch.Generator()
    gen_a.manual_seed(11)
    gen_b.manual_seed(11)
    unguided, _ = sample_ode(flow, seq, SCHEDULE, gen_a, num_samples=2)
    guided = guided_sample(flow, f_beta, seq, layout, SCHEDULE, GuidanceConfig(gamma=0.0), None, gen_b, num_samples=2)
    assert torch.equal(unguided, guided)


def test_singular_time_only_rejected_when_active(models, tiny_complex):
    flow, f_beta = models
    layout, seq = tiny_complex
    x = torch.zeros(layout.global_length, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        guided_vector_field(flow, f_beta, x, 0.0, seq, layout, GuidanceConfig(t_min_guidance=0.0))
    guided_vector_field(flow, f_beta, x, 0.0, seq, layout, GuidanceConfig(t_min_guidance=0.5))
    with pytest.raises(ValueError):
        guided_vector_field(flow, f_beta, x, 1.0, seq, layout, GuidanceConfig())


def test_guided_sample_writes_trajectory(models, tiny_complex, rng, tmp_path):
    from affinity_lab.data.dataset import read_csv

    flow, f_beta = models
    layout, seq = tiny_complex
    path = tmp_path / "trajectory.csv"
    x = guided_sample(
        flow, f_beta, seq, layout, SCHEDULE, GuidanceConfig(), RelaxConfig(max_iters=10), rng, trajectory_path=path
    )
    assert x.shape == (layout.global_length, 3)
    frame = read_csv(path)
    assert list(frame.columns) == ["step", "t", "mean_f_beta", "e_phys"]
    assert len(frame) == len(SCHEDULE)


def test_relaxation_never_increases_energy(rng):
    x = torch.randn(12, 3, generator=rng, dtype=torch.float64) * 0.4
    cfg = RelaxConfig(max_iters=100)
    history = []
    relaxed = corrector_relax(x, cfg, history)
    assert all(b <= a + 1e-15 for a, b in zip(history, history[1:]))
    assert float(physical_energy(relaxed, cfg)) < float(physical_energy(x, cfg))


def test_relaxation_of_a_relaxed_chain_is_a_fixed_point():
    x = torch.zeros(6, 3, dtype=torch.float64)
    x[:, 0] = torch.arange(6, dtype=torch.float64)
    cfg = RelaxConfig()
    assert float(physical_energy(x, cfg)) == pytest.approx(0.0, abs=1e-20)
    assert torch.allclose(corrector_relax(x, cfg), x, atol=1e-12)


def test_coincident_points_are_separated():
    x = torch.zeros(3, 3, dtype=torch.float64)
    moved = separate_coincident(x)
    assert torch.cdist(moved, moved)[torch.triu_indices(3, 3, 1).unbind()].min() > 0
    relaxed = corrector_relax(x, RelaxConfig(max_iters=50))
    assert torch.isfinite(relaxed).all()


def test_sampler_start_is_never_guided(models, tiny_complex):
    flow, f_beta = models
    layout, seq = tiny_complex
    cfg = GuidanceConfig(gamma=5.0, t_min_guidance=0.0)
    gen_a, gen_b = torch.Generator(), torch.Generator()
    gen_a.manual_seed(5)
    gen_b.manual_seed(5)
    single_step = [1.0, 0.0]
    unguided, _ = sample_ode(flow, seq, single_step, gen_a, num_samples=2)
    guided = guided_sample(flow, f_beta, seq, layout, single_step, cfg, None, gen_b, num_samples=2)
    assert torch.equal(unguided, guided)

    x = guided_sample(flow, f_beta, seq, layout, SCHEDULE, cfg, None, gen_b, num_samples=2)
    assert torch.isfinite(x).all()
