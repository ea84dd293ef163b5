import pandas as pd
import pytest
import torch

from affinity_lab.data.dataset import (
    ToyDataset,
    generate_dataset,
    read_csv,
    sample_complex_corpus,
    write_csv,
)
from affinity_lab.utils.config import NoiseConfig
from affinity_lab.utils.exceptions import CheckpointError, RegistryError


def test_default_scale_record_count(rng):
    dataset = generate_dataset(77, 54, NoiseConfig(), rng)
    assert len(dataset.records) == 4158
    assert [(r.antigen_id, r.antibody_id) for r in dataset.records[:2]] == [(0, 0), (0, 1)]
    assert dataset.heldout_antigens == list(range(44, 54))
    assert len(dataset.labels) == 120
    assert all(l.antigen_id < 44 for l in dataset.labels)


def test_labels_carry_exact_energies(tiny_dataset):
    for label in tiny_dataset.labels:
        assert label.delta_g == tiny_dataset.record(label.antigen_id, label.antibody_id).delta_g


def test_wildtype_is_registry_antibody_modulo(tiny_dataset):
    registry = tiny_dataset.registry
    for antigen_id in range(registry.num_antigens):
        assert registry.wildtype(antigen_id) == registry.antibody(antigen_id % registry.num_antibodies)


def test_unknown_ids_raise(tiny_dataset):
    with pytest.raises(RegistryError):
        tiny_dataset.registry.antibody(99)
    with pytest.raises(KeyError):
        tiny_dataset.record(99, 0)


def test_same_seed_same_dataset(tiny_world):
    gen_a, gen_b = torch.Generator(), torch.Generator()
    gen_a.manual_seed(3)
    gen_b.manual_seed(3)
    a = generate_dataset(6, 3, NoiseConfig(), gen_a, world=tiny_world)
    b = generate_dataset(6, 3, NoiseConfig(), gen_b, world=tiny_world)
    assert a.records == b.records
    assert a.registry == b.registry
    assert a.docking_seed == b.docking_seed


def test_heldout_is_clamped(tiny_world, rng):
    dataset = generate_dataset(4, 2, NoiseConfig(), rng, world=tiny_world)
    assert dataset.num_heldout == 1
    assert dataset.training_antigens == [0]


def test_save_and_load(tiny_dataset, tmp_path):
    tiny_dataset.save(tmp_path)
    loaded = ToyDataset.load(tmp_path)
    assert loaded.registry == tiny_dataset.registry
    assert loaded.records == tiny_dataset.records
    assert loaded.labels == tiny_dataset.labels
    assert loaded.docking_seed == tiny_dataset.docking_seed
    assert torch.allclose(loaded.docked(0, 1), tiny_dataset.docked(0, 1), atol=1e-12)


def test_load_missing_dataset(tmp_path):
    with pytest.raises(CheckpointError):
        ToyDataset.load(tmp_path / "nothing")


def test_docking_is_deterministic_per_pair(tiny_dataset):
    single = tiny_dataset.docked(1, 2)
    many = tiny_dataset.docked_many([(0, 0), (1, 2)])
    assert torch.allclose(single, many[1], atol=1e-12)
    assert torch.allclose(single.mean(0), torch.zeros(3, dtype=torch.float64), atol=1e-12)


def test_complex_corpus_is_centred(tiny_dataset, rng):
    corpus = sample_complex_corpus(tiny_dataset, 5, 0.3, rng)
    assert len(corpus) == 5
    for sample in corpus:
        assert sample.coords.shape == (sample.layout.global_length, 3)
        assert str(sample.sequence) == str(sample.layout.complex_sequence())
        assert sample.layout.antigen in tiny_dataset.registry.antigens[:2]


def test_csv_floats_read_back_exactly(rng, tmp_path):
    values = (torch.randn(500, generator=rng, dtype=torch.float64) * 7.3).tolist()
    values += [0.1 + 0.2, -1e-300, 123456.78901234567]
    write_csv(pd.DataFrame({"v": values}), tmp_path / "v.csv")
    assert read_csv(tmp_path / "v.csv")["v"].tolist() == values


def test_full_outlier_rate_flags_every_generated_record(rng, tiny_world):
    dataset = generate_dataset(4, 2, NoiseConfig(outlier_rate=1.0), rng, world=tiny_world)
    assert len(dataset.records) == 8
    assert all(r.is_outlier for r in dataset.records)
