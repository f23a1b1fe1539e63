import json

import pytest

from voxharm.cli import main
from voxharm.config import ConfigError, build_config, parse_config


def test_defaults_match_published_constants():
    config = build_config()
    assert config.stage1.gamma == 0.8
    assert config.stage1.tau == 100
    assert config.stage1.hist_bins == 100
    assert (config.stage1.hist_min, config.stage1.hist_max) == (-1.0, 1.0)
    assert config.trajectory.t_forward == 35
    assert config.trajectory.t_reverse == 25
    assert config.tpa.slices_per_view == 24
    assert config.tpa.alpha_init == 0.1
    assert config.schedule.timesteps == 1000
    assert (config.schedule.beta_start, config.schedule.beta_end) == (0.0015, 0.0195)
    assert config.stage1.lr == 1e-4
    assert config.stage2.lr == 5e-7
    assert config.stage1.batch_size == 4


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key stage1.gama"):
        build_config({"stage1": {"gama": 0.5}})
    with pytest.raises(ConfigError, match="unknown config section"):
        build_config({"stage_one": {}})


def test_out_of_range_gamma_rejected():
    with pytest.raises(ConfigError, match="gamma"):
        build_config({"stage1": {"gamma": 1.5}})


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="expected an integer"):
        build_config({"schedule": {"timesteps": "many"}})
    with pytest.raises(ConfigError, match="expected a boolean"):
        build_config({"denoiser": {"use_ema_modulation": 1}})


def test_trajectory_cannot_exceed_timesteps():
    with pytest.raises(ConfigError, match="t_forward"):
        build_config({"schedule": {"timesteps": 10}, "trajectory": {"t_forward": 11}})


def test_preset_overrides_then_file_overrides():
    config = build_config({"stage1": {"epochs": 3}}, preset="tiny")
    assert config.stage1.epochs == 3  # file wins
    assert config.trajectory.t_forward == 12  # preset survives elsewhere
    paper = build_config(None, preset="paper")
    assert paper.denoiser.channels == (32, 64, 256, 256)
    assert paper.tpa.embed_dim == 512


def test_echo_roundtrip(tmp_path):
    src = tmp_path / "config.json"
    src.write_text(json.dumps({"stage1": {"epochs": 2, "gamma": 0.75}, "workers": 2}))
    config = parse_config(src)
    echo = tmp_path / "echo.json"
    echo.write_text(json.dumps(config.to_dict()))
    reparsed = parse_config(echo)
    assert reparsed.to_dict() == config.to_dict()


def test_paths_resolve_relative_to_config(tmp_path):
    sub = tmp_path / "nested"
    sub.mkdir()
    src = sub / "c.json"
    src.write_text(json.dumps({"paths": {"data_dir": "d", "runs_dir": "r"}}))
    config = parse_config(src)
    assert config.data_dir() == (sub / "d").resolve()
    assert config.runs_dir() == (sub / "r").resolve()


def test_cli_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_cli_gen_data_and_echo(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(
        json.dumps(
            {
                "data": {"subjects": 2, "sites": 2, "dims": [16, 16, 16],
                         "train_subjects": [1], "val_subjects": [], "test_subjects": [2]},
            }
        )
    )
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "data" / "manifest.tsv").exists()
    echo = json.loads((tmp_path / "runs" / "gen-data.resolved.json").read_text())
    assert echo["command"] == "gen-data"
    assert echo["seed"] == 0
    assert echo["config"]["data"]["subjects"] == 2


def test_cli_missing_inputs_fail_with_error_record(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    code = main(["train-stage1", "--config", str(cfg)])
    assert code == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "error" in record and "message" in record


def test_cli_invalid_config_fails_closed(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stage1": {"gamma": 2.0}}))
    code = main(["gen-data", "--config", str(cfg)])
    assert code == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ConfigError"
