import pytest
import torch

from affinity_lab.utils.config import NoiseConfig
from affinity_lab.world.oracle import (
    apply_noise,
    complex_indices,
    contact_energy,
    fold_batch,
    noisy_binding_energy,
    oracle_binding_energies,
    oracle_binding_energy,
    oracle_ensemble_sample,
    oracle_mean_structure,
)
from affinity_lab.world.sequences import Sequence
from affinity_lab.world.tables import load_tables


def test_fold_has_unit_bonds(tiny_complex):
    _, seq = tiny_complex
    x = oracle_mean_structure(seq)
    bonds = (x[1:] - x[:-1]).norm(dim=-1)
    assert torch.allclose(bonds, torch.ones_like(bonds), atol=1e-12)
    assert torch.equal(x[0], torch.zeros(3, dtype=torch.float64))


def test_fold_is_deterministic_and_batched(tiny_complex):
    _, seq = tiny_complex
    single = oracle_mean_structure(seq)
    batch = fold_batch(torch.stack([seq.encode(), seq.encode()]))
    assert torch.equal(batch[0], single)
    assert torch.equal(batch[1], single)


def test_poly_glycine_is_collinear():
    x = oracle_mean_structure(Sequence("G" * 8))
    assert torch.allclose(x[:, 1:], torch.zeros(8, 2, dtype=torch.float64), atol=1e-12)


def test_upstream_change_moves_downstream_rigidly():
    a = oracle_mean_structure(Sequence("ACDEFGHIKLMN"))
    b = oracle_mean_structure(Sequence("ACDWFGHIKLMN"))
    tail_a, tail_b = a[6:], b[6:]
    da = torch.cdist(tail_a, tail_a)
    db = torch.cdist(tail_b, tail_b)
    assert torch.allclose(da, db, atol=1e-10)


def test_zero_fluctuation_returns_mean(tiny_complex, rng):
    _, seq = tiny_complex
    x = oracle_ensemble_sample(seq, 0.0, rng)
    assert torch.equal(x, oracle_mean_structure(seq))
    with pytest.raises(ValueError):
        oracle_ensemble_sample(seq, -0.1, rng)


def test_ensemble_sample_shapes(tiny_complex, rng):
    _, seq = tiny_complex
    assert oracle_ensemble_sample(seq, 0.3, rng).shape == (len(seq), 3)
    assert oracle_ensemble_sample(seq, 0.3, rng, num_samples=5).shape == (5, len(seq), 3)


def test_batched_energies_match_single(tiny_complex):
    layout, _ = tiny_complex
    antibodies = [Sequence("ACDEFGHIKL"), Sequence("ACDEFWWWWL"), Sequence("YYYYYGHIKL")]
    batched = oracle_binding_energies(antibodies, layout.antigen, layout)
    for ab, value in zip(antibodies, batched):
        assert float(value) == pytest.approx(oracle_binding_energy(ab, layout.antigen, layout), abs=1e-12)


def test_contact_energy_only_reads_cdr_antigen_pairs(tiny_complex):
    layout, seq = tiny_complex
    tables = load_tables()
    x = oracle_mean_structure(seq)
    indices = complex_indices(layout.antibody, layout.antigen, layout)
    moved = x.clone()
    moved[0] += 5.0  # residue 0 is outside the CDR
    assert float(contact_energy(x, indices, layout, tables)) == pytest.approx(
        float(contact_energy(moved, indices, layout, tables)), abs=1e-12
    )


def test_apply_noise_consumes_fixed_draws(rng):
    cfg = NoiseConfig(gaussian_sigma=1.0, outlier_rate=0.5)
    energies = torch.zeros(100, dtype=torch.float64)
    noisy, outliers = apply_noise(energies, cfg, rng)
    assert noisy.shape == outliers.shape == (100,)
    assert torch.all(noisy[outliers].abs() <= cfg.magnitude)

    gen_a, gen_b = torch.Generator(), torch.Generator()
    gen_a.manual_seed(0)
    gen_b.manual_seed(0)
    apply_noise(energies, NoiseConfig(outlier_rate=0.0), gen_a)
    apply_noise(energies, NoiseConfig(outlier_rate=1.0), gen_b)
    assert torch.equal(torch.rand(3, generator=gen_a), torch.rand(3, generator=gen_b))


def test_noiseless_record_matches_oracle(tiny_complex, rng):
    layout, _ = tiny_complex
    cfg = NoiseConfig(gaussian_sigma=0.0, outlier_rate=0.0)
    record = noisy_binding_energy(layout.antibody, layout.antigen, layout, cfg, rng)
    assert record.delta_g_noisy == record.delta_g
    assert not record.is_outlier


def test_ensemble_mean_converges_to_mean_structure(tiny_complex, rng):
    _, seq = tiny_complex
    samples = oracle_ensemble_sample(seq, 0.3, rng, num_samples=10000)
    stderr = samples.std(0) / 10000**0.5
    z = (samples.mean(0) - oracle_mean_structure(seq)).abs() / stderr
    # 69 coordinates: a few may sit past 3 standard errors by chance, none past 5.
    assert float((z <= 3.0).double().mean()) >= 0.95
    assert torch.all(z <= 5.0)


def test_gaussian_noise_is_centred(rng):
    cfg = NoiseConfig(gaussian_sigma=1.0, outlier_rate=0.2)
    energies = torch.linspace(-10.0, -2.0, 12500, dtype=torch.float64)
    noisy, outliers = apply_noise(energies, cfg, rng)
    residual = (noisy - energies)[~outliers]
    assert len(residual) > 9000
    assert abs(float(residual.mean())) <= 3 * cfg.gaussian_sigma / len(residual) ** 0.5
    assert float(residual.std()) == pytest.approx(cfg.gaussian_sigma, rel=0.05)


def test_full_outlier_rate_flags_every_record(tiny_complex, rng):
    layout, _ = tiny_complex
    cfg = NoiseConfig(outlier_rate=1.0)
    _, outliers = apply_noise(torch.zeros(1000, dtype=torch.float64), cfg, rng)
    assert torch.all(outliers)
    record = noisy_binding_energy(layout.antibody, layout.antigen, layout, cfg, rng)
    assert record.is_outlier
    assert abs(record.delta_g_noisy - record.delta_g) <= cfg.magnitude
