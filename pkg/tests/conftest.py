import pytest
import torch

from affinity_lab.data.dataset import generate_dataset
from affinity_lab.models.flow import FlowModel
from affinity_lab.models.inverse_folding import InverseFoldModel
from affinity_lab.models.predictors import SeqPredictor, StructPredictor
from affinity_lab.pipeline.design import Artifacts
from affinity_lab.utils.config import NoiseConfig, WorldConfig, build_config
from affinity_lab.world.sequences import Sequence, make_complex

TINY_WORLD = dict(
    num_antibodies=8,
    num_antigens=4,
    antibody_length=10,
    antigen_length=8,
    cdr_positions=[5, 6, 7, 8],
    linker_repeats=1,
    heldout_antigens=2,
)


@pytest.fixture
def rng():
    generator = torch.Generator()
    generator.manual_seed(1234)
    return generator


@pytest.fixture
def tiny_world():
    return WorldConfig(**TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_dataset():
    generator = torch.Generator()
    generator.manual_seed(7)
    return generate_dataset(
        TINY_WORLD["num_antibodies"],
        TINY_WORLD["num_antigens"],
        NoiseConfig(),
        generator,
        world=WorldConfig(**TINY_WORLD),
        num_labels=10,
    )


@pytest.fixture
def tiny_complex():
    """A 10-residue antibody, one linker unit and an 8-residue antigen (23 residues)."""
    layout, seq = make_complex(Sequence("ACDEFGHIKL"), Sequence("MNPQRSTV"), 1, [5, 6, 7, 8])
    return layout, seq


@pytest.fixture
def tiny_config(tmp_path):
    return build_config(
        {
            "out": str(tmp_path / "run"),
            "world": dict(TINY_WORLD),
            "predictors": {"num_neighbors": 4, "hidden_dim": 16, "embed_dim": 4, "num_labels": 10},
            "inverse_folding": {"num_neighbors": 4, "hidden_dim": 16, "embed_dim": 4},
            "flow": {"hidden_dim": 16, "embed_dim": 4, "time_embed_dim": 4},
            "run": {
                "iterations": 3,
                "seeds": [0, 1],
                "mutation": {"arities": [1, 2, 3], "per_arity": 3, "top_m": 2},
                "relax": {"max_iters": 20},
                "structure_samples": 2,
            },
            "logging": {"dont_save_events": True},
        }
    )


def untrained_artifacts(dataset, seed: int = 0) -> Artifacts:
    torch.manual_seed(seed)
    cdr = dataset.world.cdr_positions
    seq = {k: SeqPredictor(cdr, 16, 4) for k in ("supervised", "unfiltered", "coteach")}
    struct = {k: StructPredictor(len(cdr), 16, 4, 4) for k in ("supervised", "unfiltered", "coteach")}
    return Artifacts(
        dataset=dataset,
        flow=FlowModel(16, 4, 4),
        inverse_fold=InverseFoldModel(16, 4, 4),
        seq_predictors=seq,
        struct_predictors=struct,
    )


@pytest.fixture(scope="session")
def tiny_artifacts(tiny_dataset):
    return untrained_artifacts(tiny_dataset)
