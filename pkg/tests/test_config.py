import pytest
import yaml

from affinity_lab.cli import build_parser
from affinity_lab.utils.config import (
    DEFAULT_SCHEDULE,
    ExperimentConfig,
    build_config,
    check_config,
    config_from_args,
    dump_config,
    load_config_file,
)
from affinity_lab.utils.exceptions import ConfigError


def test_defaults():
    cfg = build_config()
    assert cfg.world.num_antibodies == 77
    assert cfg.world.num_antigens == 54
    assert cfg.run.schedule == DEFAULT_SCHEDULE
    assert cfg.run.guidance.gamma == 5.0
    assert cfg.run.ablation.variant == "full"


def test_one_iteration_forces_single_pass():
    cfg = build_config(overrides={"run.iterations": 5, "run.ablation.one_iteration": True})
    assert cfg.run.iterations == 1


@pytest.mark.parametrize(
    "schedule",
    [[1.0], [1.0, 0.5], [1.0, 0.6, 0.6, 0.0], [0.3, 0.6, 0.0]],
)
def test_bad_schedules_are_rejected(schedule):
    with pytest.raises(ConfigError):
        build_config(overrides={"run.schedule": schedule})


def test_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        build_config({"run": {"gamma": 1.0}})
    with pytest.raises(ConfigError):
        build_config(overrides={"run.guidance.gamma": -1.0})


def test_file_then_overrides(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"seed": 4, "run": {"guidance": {"gamma": 2.0}, "iterations": 2}}))
    cfg = build_config(load_config_file(path), {"run.guidance.gamma": 3.0})
    assert (cfg.seed, cfg.run.iterations, cfg.run.guidance.gamma) == (4, 2, 3.0)
    assert cfg.run.guidance.t_min_guidance == 0.5


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "absent.yaml")


def test_dump_round_trips(tmp_path):
    cfg = build_config(overrides={"seed": 9, "run.seeds": [1, 2]})
    dump_config(cfg, tmp_path / "config.yaml")
    assert build_config(load_config_file(tmp_path / "config.yaml")) == cfg


def test_dotted_command_line_flags(tmp_path):
    args = build_parser().parse_args(
        [
            "run",
            "--out",
            str(tmp_path),
            "--run.guidance.gamma",
            "0",
            "--run.schedule",
            "1.0",
            "0.5",
            "0.0",
            "--run.ablation.no_pc",
        ]
    )
    cfg = config_from_args(args)
    assert cfg.out == str(tmp_path)
    assert cfg.run.guidance.gamma == 0.0
    assert cfg.run.schedule == [1.0, 0.5, 0.0]
    assert cfg.run.ablation.no_pc
    assert cfg.run.ablation.variant == "no_pc"


def test_check_config_rejects_inconsistent_world(tmp_path):
    cfg = ExperimentConfig(out=str(tmp_path))
    cfg.world.heldout_antigens = cfg.world.num_antigens
    with pytest.raises(ConfigError):
        check_config(cfg)


def test_guidance_flags_live_under_run(tmp_path):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--out", str(tmp_path), "--guidance.gamma", "2.5"])
    args = build_parser().parse_args(["run", "--out", str(tmp_path), "--run.guidance.t_min_guidance", "0.2"])
    assert config_from_args(args).run.guidance.t_min_guidance == 0.2
