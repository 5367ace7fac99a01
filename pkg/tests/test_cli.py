import os

import numpy as np
import pytest

from rcmact import dataset
from rcmact.cli import load_config, main, worker_count
from rcmact.errors import UnknownKeyError

FAST_TRAIN = ["--chunk", "4", "--epochs", "3", "--seed", "1"]


def run(argv):
    return main(argv)


def test_no_arguments_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0


def test_unknown_subcommand_usage_error():
    assert run(["frobnicate"]) == 1


def test_collect_writes_episodes_and_manifest(tmp_path, capsys):
    out = tmp_path / "data"
    code = run(["collect", "--episodes", "2", "--seed", "7", "--out", str(out),
                "--quiet"])
    assert code == 0
    files = sorted(p.name for p in out.glob("*.arng"))
    assert files == ["episode_00000.arng", "episode_00001.arng"]
    assert (out / "manifest.txt").exists()
    eps = dataset.load_dataset(out)
    assert [ep.seed for ep in eps] == [7, 8]
    assert not any(ep.calibrated for ep in eps)


def test_collect_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["collect", "--episodes", "2", "--seed", "3", "--out",
                    str(out), "--quiet"]) == 0
    for name in ("episode_00000.arng", "episode_00001.arng", "manifest.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_full_pipeline_smoke(tmp_path):
    raw = tmp_path / "raw"
    cal = tmp_path / "cal"
    model = tmp_path / "model.arnm"
    rollouts = tmp_path / "rollouts"
    report = tmp_path / "metrics.csv"
    ablation = tmp_path / "ablation.csv"

    assert run(["collect", "--episodes", "2", "--seed", "11", "--out", str(raw),
                "--quiet"]) == 0
    assert run(["calibrate-data", "--in", str(raw), "--out", str(cal),
                "--quiet"]) == 0
    eps = dataset.load_dataset(cal)
    assert all(ep.calibrated for ep in eps)
    assert run(["train", "--data", str(cal), "--out", str(model), "--quiet",
                *FAST_TRAIN]) == 0
    assert model.exists() and model.with_name(model.name + ".losses.csv").exists()
    assert run(["rollout", "--model", str(model), "--episodes", "2", "--seed",
                "11", "--variant", "full", "--out", str(rollouts),
                "--quiet"]) == 0
    sidecars = sorted(rollouts.glob("*.outcome.txt"))
    assert len(sidecars) == 2
    assert run(["eval", "--rollouts", str(rollouts), "--experts", str(raw),
                "--report", str(report), "--quiet"]) == 0
    lines = report.read_text().splitlines()
    assert lines[0].startswith("seed,variant,mse")
    assert len(lines) == 3
    assert run(["ablate", "--model", str(model), "--episodes", "1",
                "--seed", "11", "--report", str(ablation), "--quiet",
                "--variants", "full,no_ensemble"]) == 0
    assert len(ablation.read_text().splitlines()) == 3


def test_calibrate_data_identity_flag(tmp_path):
    raw = tmp_path / "raw"
    flagged = tmp_path / "flagged"
    assert run(["collect", "--episodes", "1", "--seed", "5", "--out", str(raw),
                "--quiet"]) == 0
    assert run(["calibrate-data", "--in", str(raw), "--out", str(flagged),
                "--identity", "--quiet"]) == 0
    src = dataset.load_dataset(raw)[0]
    out = dataset.load_dataset(flagged)[0]
    assert out.calibrated
    assert np.array_equal(out.observations, src.observations)
    assert np.array_equal(out.actions, src.actions)


def test_rollout_artifacts_reproducible(tmp_path):
    raw = tmp_path / "raw"
    cal = tmp_path / "cal"
    model = tmp_path / "m.arnm"
    run(["collect", "--episodes", "1", "--seed", "2", "--out", str(raw), "--quiet"])
    run(["calibrate-data", "--in", str(raw), "--out", str(cal), "--quiet"])
    run(["train", "--data", str(cal), "--out", str(model), "--quiet", *FAST_TRAIN])
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    for out in (r1, r2):
        assert run(["rollout", "--model", str(model), "--episodes", "1",
                    "--seed", "2", "--variant", "full", "--out", str(out),
                    "--quiet"]) == 0
    assert (r1 / "rollout_00000.arng").read_bytes() == (r2 / "rollout_00000.arng").read_bytes()
    assert (r1 / "rollout_00000.outcome.txt").read_bytes() == (r2 / "rollout_00000.outcome.txt").read_bytes()


def test_train_on_raw_data_is_a_data_error(tmp_path, capsys):
    raw = tmp_path / "raw"
    run(["collect", "--episodes", "1", "--seed", "2", "--out", str(raw), "--quiet"])
    code = run(["train", "--data", str(raw), "--out", str(tmp_path / "m.arnm"),
                "--quiet", *FAST_TRAIN])
    assert code == 2
    assert "calibrate" in capsys.readouterr().err.lower()


def test_missing_model_is_a_data_error(tmp_path):
    assert run(["rollout", "--model", str(tmp_path / "nope.arnm"), "--episodes",
                "1", "--seed", "0", "--variant", "full",
                "--out", str(tmp_path / "r"), "--quiet"]) == 2


def test_calibrate_utility_inline_and_file(tmp_path, capsys):
    ref = "0,0,0,10,0,0,0,10,0"
    obs = "1,2,3,11,2,3,1,12,3"  # pure translation by (1,2,3)
    assert run(["calibrate", "--ref", ref, "--obs", obs]) == 0
    out = capsys.readouterr().out
    assert "translation_mm=1,2,3" in out.replace(" ", "")
    ref_file = tmp_path / "ref.txt"
    ref_file.write_text("0 0 0\n10 0 0\n0 10 0\n".replace(" ", ","))
    assert run(["calibrate", "--ref", str(ref_file), "--obs", obs]) == 0


def test_calibrate_degenerate_is_data_error(capsys):
    code = run(["calibrate", "--ref", "0,0,0,1,0,0,2,0,0",
                "--obs", "0,0,0,1,0,0,0,1,0"])
    assert code == 2


# --- config file ---------------------------------------------------------------

def test_load_config_empty_file_all_defaults(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("")
    out = load_config(path)
    assert out == {"world": {}, "policy": {}, "ensemble": {}}


def test_load_config_sections_and_flat(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text(
        "world.success_tolerance = 0.3\n"
        "[policy]\n"
        "chunk_size = 12  # steps\n"
        "hidden_dims = 64,64\n")
    out = load_config(path)
    assert out["world"]["success_tolerance"] == 0.3
    assert out["policy"]["chunk_size"] == 12
    assert out["policy"]["hidden_dims"] == (64, 64)


def test_load_config_unknown_key_named(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("[policy]\nchnk_size = 90\n")
    with pytest.raises(UnknownKeyError, match="chnk_size"):
        load_config(path)


def test_load_config_bad_value_type(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("[world]\nsuccess_tolerance = soon\n")
    with pytest.raises(ValueError, match="success_tolerance"):
        load_config(path)


def test_flag_overrides_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("[policy]\nepochs = 999999\n")
    raw = tmp_path / "raw"
    cal = tmp_path / "cal"
    run(["collect", "--episodes", "1", "--seed", "2", "--out", str(raw), "--quiet"])
    run(["calibrate-data", "--in", str(raw), "--out", str(cal), "--quiet"])
    model = tmp_path / "m.arnm"
    # the flag must win over the config file or this would take forever
    assert run(["train", "--data", str(cal), "--out", str(model),
                "--config", str(cfg), "--quiet", *FAST_TRAIN]) == 0
    from rcmact.policy import load_parameters
    assert load_parameters(model).config.epochs == 3


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("RCMACT_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("RCMACT_THREADS", "4")
    assert worker_count() == 4
    monkeypatch.setenv("RCMACT_THREADS", "0")
    assert worker_count() == (os.cpu_count() or 1)


def test_collect_parallel_matches_serial(tmp_path, monkeypatch):
    serial, parallel = tmp_path / "s", tmp_path / "p"
    monkeypatch.delenv("RCMACT_THREADS", raising=False)
    assert run(["collect", "--episodes", "3", "--seed", "5", "--out",
                str(serial), "--quiet"]) == 0
    monkeypatch.setenv("RCMACT_THREADS", "2")
    assert run(["collect", "--episodes", "3", "--seed", "5", "--out",
                str(parallel), "--quiet"]) == 0
    for name in ("episode_00000.arng", "episode_00001.arng", "episode_00002.arng"):
        assert (serial / name).read_bytes() == (parallel / name).read_bytes()
