"""
Statistical end-to-end checks on trained toy models. Selected with `pytest -m slow`.
"""

import statistics

import pytest
import torch

from affinity_lab.cli import main
from affinity_lab.data.dataset import read_csv
from affinity_lab.guidance import guided_sample
from affinity_lab.pipeline.design import load_artifacts
from affinity_lab.pipeline.experiments import run_sweep
from affinity_lab.utils.config import ExperimentConfig, GuidanceConfig, build_config, load_config_file
from affinity_lab.utils.misc import make_generator

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    common = ["--out", str(out), "--logging.dont_save_events"]
    for stage in ("gen-data", "train-flow", "train-predictors"):
        assert main([stage, *common]) == 0
    ladders, reports = [], []
    for seed in (0, 1, 2):
        assert main(["coteach", *common, "--seed", str(seed)]) == 0
        ladders.append(read_csv(out / "spearman_ladder.csv").set_index("predictor"))
        reports.append(read_csv(out / "coteach_report.csv"))
    cfg = build_config(load_config_file(out / "config.yaml"))
    return cfg, ladders, reports


def test_coteaching_ladder(trained_run):
    _, ladders, _ = trained_run
    for predictor in ("seq", "struct"):
        median = {
            rung: statistics.median(ladder.loc[predictor, rung] for ladder in ladders)
            for rung in ("supervised", "unfiltered", "filtered")
        }
        assert median["supervised"] < median["unfiltered"] <= median["filtered"]
        assert abs(median["supervised"]) < 0.25
        assert median["filtered"] > 0.35


def test_guidance_lowers_predicted_energy(trained_run):
    cfg, _, _ = trained_run
    artifacts = load_artifacts(cfg)
    _, f_beta = artifacts.predictors_for(cfg.run.ablation)
    antigen_id = artifacts.dataset.heldout_antigens[0]
    layout = artifacts.dataset.layout(antigen_id)
    seq = layout.complex_sequence()

    def mean_score(gamma, seed):
        x = guided_sample(
            artifacts.flow,
            f_beta,
            seq,
            layout,
            cfg.run.schedule,
            GuidanceConfig(gamma=gamma, t_min_guidance=cfg.run.guidance.t_min_guidance),
            cfg.run.relax,
            make_generator(seed, "guidance"),
            num_samples=64,
            stiffness=cfg.flow.stiffness,
        )
        with torch.no_grad():
            return float(f_beta(x, seq.encode(), layout).mean())

    guided = [mean_score(5.0, seed) for seed in range(16)]
    unguided = [mean_score(0.0, seed) for seed in range(16)]
    assert statistics.median(guided) < statistics.median(unguided)


def test_full_pipeline_beats_every_ablation(trained_run):
    cfg, _, _ = trained_run
    out = cfg.out
    assert main(["ablate", "--out", out, "--logging.dont_save_events"]) == 0
    table = read_csv(f"{out}/ablation.csv").set_index("variant")
    full = table.loc["full", "imp"]
    for variant in ("one_iteration", "no_pc", "no_flow", "no_energy", "no_selection"):
        assert full >= table.loc[variant, "imp"]


def test_design_run_is_byte_identical(trained_run):
    cfg, _, _ = trained_run
    args = ["run", "--out", cfg.out, "--logging.dont_save_events", "--run.seeds", "0"]
    assert main(args) == 0
    designs = open(f"{cfg.out}/designs.csv", "rb").read()
    assert main(args) == 0
    assert open(f"{cfg.out}/designs.csv", "rb").read() == designs


def test_filter_agreement_does_not_fall_across_rounds(trained_run):
    _, _, reports = trained_run
    for teacher in ("seq", "struct"):
        per_seed = [r[r.teacher == teacher].sort_values("round")["agreement"].tolist() for r in reports]
        medians = [statistics.median(values) for values in zip(*per_seed)]
        assert len(medians) >= 2
        assert all(a <= b for a, b in zip(medians, medians[1:]))


def test_stronger_guidance_does_not_lower_improvement(trained_run, tmp_path):
    cfg, _, _ = trained_run
    tree = cfg.model_dump()
    tree["sweep"]["gammas"] = [0.0, 5.0]
    frame = run_sweep("gamma", ExperimentConfig.model_validate(tree), load_artifacts(cfg), tmp_path)
    imp = frame.set_index("value")["imp"]
    assert imp.loc[5.0] >= imp.loc[0.0]
