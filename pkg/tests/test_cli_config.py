import locale
import shutil
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cranerl import checkpoint as ckpt_io
from cranerl.cli import main, parse_perturb, CliError
from cranerl.config import (RunConfig, config_from_dict, config_to_dict, dump_config, load_config,
                            parse_config)
from cranerl.reporting import fmt, read_csv, TRAJECTORY_HEADER
from cranerl.training import Trainer, policy_from_checkpoint
from cranerl.world import ConfigurationError

ROOT = Path(__file__).resolve().parents[1]
SHRUNK = ROOT / "configs" / "desk_shrunk.yaml"

TINY_YAML = """\
mode: plain
seed: 7
budget: 256
env:
  nominal_q: [1.5707963267948966, 0.425, -0.9126, 0.0, 0.0, 0.3]
curriculum:
  h0: 0.5
  descent_step: 0.5
  expansion_factors: [1.0]
  initial_region: {r_min: 4.2, r_max: 4.8, theta_min: 1.51, theta_max: 1.63}
  target_region: {r_min: 4.2, r_max: 4.8, theta_min: 1.51, theta_max: 1.63}
ppo:
  n_envs: 2
  horizon: 32
  minibatch_size: 32
  hidden_sizes: [16, 16]
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML)
    return path


# -- configuration -----------------------------------------------------------------------

def test_default_config_round_trip_is_a_fixed_point():
    text = dump_config(RunConfig())
    assert dump_config(parse_config(text)) == text
    assert parse_config(text) == RunConfig()


def test_shrunk_config_round_trip():
    cfg = load_config(SHRUNK)
    assert config_from_dict(config_to_dict(cfg)) == cfg
    assert cfg.mode == "plain" and cfg.env.reward.mode == "plain"


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    assert load_config(p) == RunConfig()
    assert load_config(None) == RunConfig()


@pytest.mark.parametrize("text", ["bogus: 1\n", "ppo:\n  clip: 0.2\n", "env:\n  reward:\n    mode: plain\n"])
def test_unknown_or_derived_keys_are_rejected(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_invalid_values_are_configuration_errors():
    with pytest.raises(ConfigurationError):
        parse_config("ppo:\n  clip_eps: 2.0\n")
    with pytest.raises(ConfigurationError):
        parse_config("mode: fancy\n")


def test_mode_alias_and_sync():
    cfg = parse_config("mode: energy_optimized\n")
    assert cfg.mode == "energy" and cfg.env.reward.mode == "energy"


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_encode_decode_is_byte_identical(tiny):
    tr = Trainer(load_config(tiny))
    tr.train(128)
    data = ckpt_io.encode(tr.to_checkpoint())
    again = Trainer.from_checkpoint(ckpt_io.decode(data))
    assert ckpt_io.encode(again.to_checkpoint()) == data


def test_checkpoint_version_mismatch_is_rejected(tiny):
    tr = Trainer(load_config(tiny))
    ck = tr.to_checkpoint()
    data = ckpt_io.encode(replace(ck, version=ck.version + 1))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.decode(data)
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.decode(b"not a checkpoint")


def test_resuming_under_a_different_config_is_rejected(tiny):
    tr = Trainer(load_config(tiny))
    with pytest.raises(ckpt_io.CheckpointError):
        Trainer.from_checkpoint(tr.to_checkpoint(), replace(tr.cfg, seed=8))


# -- command line -----------------------------------------------------------------------------

def test_parse_perturb():
    assert parse_perturb(["slope_grade=0.1", "base_compliance_enabled=true"]) == {
        "slope_grade": 0.1, "base_compliance_enabled": True}
    with pytest.raises(CliError):
        parse_perturb(["slope_grade"])


def test_train_zero_steps_writes_initial_checkpoint(tiny, tmp_path):
    out = tmp_path / "run0"
    assert main(["train", "--config", str(tiny), "--steps", "0", "--out", str(out), "--quiet"]) == 0
    cfg, policy, stats = policy_from_checkpoint(ckpt_io.load(out / "checkpoint.ckpt"))
    assert cfg.budget == 0 and stats.count == 0
    header, rows = read_csv(out / "training_log.csv")
    assert rows == []
    assert load_config(out / "config.yaml") == cfg


def test_train_resume_and_evaluate_checkpoint(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
    header, rows = read_csv(out / "training_log.csv")
    assert [int(r[0]) for r in rows] == [128, 256]
    for name in ("return_curve.csv", "plane_height.csv", "episodes.csv", "schedule.csv",
                 "training_curves.png"):
        assert (out / name).exists()
    more = tmp_path / "more"
    assert main(["train", "--resume", str(out / "checkpoint.ckpt"), "--steps", "384",
                 "--out", str(more), "--quiet"]) == 0
    _, rows = read_csv(more / "training_log.csv")
    assert int(rows[-1][0]) == 384
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(more / "checkpoint.ckpt"), "--episodes", "1",
                 "--out", str(ev), "--reference", str(out / "checkpoint.ckpt")]) == 0
    header, rows = read_csv(ev / "summary.csv")
    assert len(rows) == 2


def test_eval_scripted_policy(tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(SHRUNK), "--policy", "scripted", "--episodes", "1",
                 "--record", "1", "--out", str(out)]) == 0
    header, rows = read_csv(out / "summary.csv")
    assert float(rows[0][header.index("success_rate")]) == 1.0
    assert (out / "trajectory_0.csv").exists()
    assert (out / "tip_profiles.png").exists() and (out / "energy_histogram.png").exists()


def test_sensitivity_with_empty_suite_writes_header_only(tmp_path):
    out = tmp_path / "sens"
    assert main(["sensitivity", "--config", str(SHRUNK), "--policy", "scripted", "--episodes", "1",
                 "--suite", "none", "--out", str(out)]) == 0
    header, rows = read_csv(out / "sensitivity.csv")
    assert header == ["perturbation", "baseline", "perturbed", "retention"]
    assert rows == []


def test_export_trajectory_matches_recorded_episode(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["--config", str(SHRUNK), "--policy", "scripted", "--seed", "9"]
    assert main(["export-trajectory", *common, "--episode", "1", "--out", str(a)]) == 0
    assert main(["eval", *common, "--episodes", "2", "--record", "2", "--out", str(b)]) == 0
    assert (a / "trajectory_1.csv").read_text() == (b / "trajectory_1.csv").read_text()
    header, rows = read_csv(a / "trajectory_1.csv")
    assert header == list(TRAJECTORY_HEADER)
    assert np.all(np.diff([float(r[-1]) for r in rows]) >= 0)


def test_missing_files_give_nonzero_exit(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--episodes", "1"]) != 0
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) != 0
    assert "error" in capsys.readouterr().err


def test_bad_config_gives_exit_code_two(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("ppo:\n  gamma: 3.0\n")
    assert main(["print-config", "--config", str(p)]) == 2


def test_print_config_round_trips(capsys):
    assert main(["print-config", "--config", str(SHRUNK)]) == 0
    assert parse_config(capsys.readouterr().out) == load_config(SHRUNK)


def test_invalid_thread_setting(monkeypatch):
    monkeypatch.setenv("CRANE_RL_THREADS", "zero")
    assert main(["print-config"]) == 2


# -- reporting ---------------------------------------------------------------------------------

def test_number_format_is_locale_independent():
    try:
        locale.setlocale(locale.LC_NUMERIC, "de_DE.UTF-8")
    except locale.Error:
        pass
    try:
        assert fmt(0.5) == "0.5"
        assert fmt(1234.25) == "1234.25"
        assert fmt(True) == "1"
        assert fmt(math.nan) in ("nan", "NaN")
    finally:
        locale.setlocale(locale.LC_NUMERIC, "C")


def test_two_tiny_runs_are_bitwise_identical(tiny, tmp_path):
    # the output directory is part of the saved configuration, so both runs use the same one
    out = tmp_path / "run"
    names = ("training_log.csv", "checkpoint.ckpt", "episodes.csv")
    first = {}
    for attempt in range(2):
        assert main(["train", "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
        data = {n: (out / n).read_bytes() for n in names}
        if attempt == 0:
            first = data
            shutil.rmtree(out)
    assert data == first
