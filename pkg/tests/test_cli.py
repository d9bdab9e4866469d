import json
import shutil
import subprocess
import sys

import pytest

from oracle_guided.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


def run(*argv):
    return main([str(a) for a in argv])


def test_schema_via_console_script():
    out = subprocess.run([sys.executable, "-m", "oracle_guided.cli", "schema"],
                         capture_output=True, text=True, check=False)
    assert out.returncode == 0
    assert json.loads(out.stdout)["seeds"] == "<required>"


def test_train_then_eval_and_grid(tiny_config, tmp_path, capsys):
    assert run("train", "--config", tiny_config, "--quiet") == EXIT_OK
    root = tmp_path / "out" / "tiny_seed0"
    ckpt = root / "seed_0" / "checkpoint.bin"
    assert ckpt.is_file()
    capsys.readouterr()
    assert run("eval", "--config", tiny_config, "--checkpoint", ckpt, "--episodes", 2,
               "--out", tmp_path / "ev") == EXIT_OK
    assert capsys.readouterr().out.startswith("MHA_g,MHS,MF,EL")
    assert (tmp_path / "ev" / "eval_episodes.csv").is_file()
    assert (tmp_path / "ev" / "manifest.json").is_file()
    assert run("versatility-grid", "--config", tiny_config, "--checkpoint", ckpt,
               "--out", tmp_path / "grid.csv") == EXIT_OK
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 9


def test_dataset_encoder_and_oracle_viz(tiny_config, tmp_path, capsys):
    data = tmp_path / "d" / "data.csv"
    assert run("gen-dataset", "--config", tiny_config, "--out", data, "--n-per-mode", 8) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"jump": 8, "leap": 8, "pace": 8}
    assert run("train-encoder", "--config", tiny_config, "--dataset", data,
               "--out", tmp_path / "enc") == EXIT_OK
    assert capsys.readouterr().out.startswith("train_rmse,heldout_rmse,separation")
    for name in ("encoder.bin", "latents.csv", "encoder_loss.csv", "manifest.json"):
        assert (tmp_path / "enc" / name).is_file()
    assert run("oracle-viz", "--config", tiny_config, "--mode", "leap", "--oracle", "lqr") == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "step,phase,p_x,p_z,theta,v_x,v_z,omega" and len(lines) == 12


def test_sweep_command(tiny_config, tmp_path, capsys):
    assert run("sweep", "--config", tiny_config, "--axis", "horizon", "--values", "5,10",
               "--out", tmp_path / "sw") == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("value,n_ok") and len(out) == 3
    assert (tmp_path / "sw" / "sweep_long.csv").is_file()


def test_config_errors_exit_2(tiny_config, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(tiny_config.read_text() + "extra_key: 1\n")
    assert run("train", "--config", bad) == EXIT_CONFIG
    assert "extra_key" in capsys.readouterr().err
    assert run("train", "--config", tmp_path / "missing.yaml") == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        run("train")
    assert info.value.code == 2


def test_train_encoder_horizon_mismatch_is_a_config_error(tiny_config, tmp_path):
    data = tmp_path / "data.csv"
    assert run("gen-dataset", "--config", tiny_config, "--out", data, "--n-per-mode", 4) == EXIT_OK
    other = tmp_path / "h7.yaml"
    other.write_text(tiny_config.read_text().replace("horizon: 10", "horizon: 7"))
    assert run("train-encoder", "--config", other, "--dataset", data, "--out", tmp_path / "e") == EXIT_CONFIG


def test_runtime_failures_exit_3(tiny_config, tmp_path):
    assert run("train", "--config", tiny_config, "--quiet") == EXIT_OK
    ckpt = tmp_path / "out" / "tiny_seed0" / "seed_0" / "checkpoint.bin"
    broken = tmp_path / "broken.bin"
    shutil.copy(ckpt, broken)
    shutil.copy(str(ckpt) + ".json", str(broken) + ".json")
    broken.write_bytes(broken.read_bytes()[:-8])
    assert run("eval", "--config", tiny_config, "--checkpoint", broken) == EXIT_RUNTIME
    assert run("eval", "--config", tiny_config, "--checkpoint", tmp_path / "nope.bin") == EXIT_RUNTIME
    assert run("train-encoder", "--config", tiny_config, "--dataset", tmp_path / "none.csv",
               "--out", tmp_path / "e") == EXIT_RUNTIME
