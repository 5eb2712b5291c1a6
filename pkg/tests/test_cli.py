import json
import subprocess
import sys

import pytest

from msrn.cli import main
from msrn.tensorio import read_tensor


def test_no_arguments_prints_usage_and_exits_2(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["gradcheck", "--no-such-flag"]) == 2
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "msrn"], capture_output=True, text=True)
    assert out.returncode == 2 and "usage" in out.stderr


def test_defaults_mirror_training_protocol():
    from msrn.cli import build_parser
    a = build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert (a.groups, a.lam, a.lr, a.momentum, a.weight_decay) == (4, 0.001, 0.01, 0.9, 1e-4)
    assert (a.epochs, a.decay_every, a.decay_factor, a.batch, a.branches) == (90, 30, 0.1, 8, 3)


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "train"), "--images", "24", "--seed", "1"]) == 0
    assert main(["synth", "--out", str(root / "test"), "--images", "12", "--seed", "2"]) == 0
    assert main(["train", "--data", str(root / "train"), "--eval-data", str(root / "test"),
                 "--out", str(root / "run"), "--epochs", "2", "--lr", "0.005"]) == 0
    return root


def test_synth_writes_dataset_and_config(run_dirs):
    assert (run_dirs / "train" / "Y.csv").exists()
    cfg = json.loads((run_dirs / "train" / "run_config.json").read_text())
    assert cfg["command"] == "synth" and cfg["synth"]["n_images"] == 24


def test_train_outputs(run_dirs):
    run = run_dirs / "run"
    assert len((run / "history.jsonl").read_text().splitlines()) == 2
    cfg = json.loads((run / "run_config.json").read_text())
    assert cfg["train"]["lr"] == 0.005 and cfg["model"]["groups"] == 4
    assert (run / "checkpoint" / "manifest.txt").exists()


def test_rerun_from_config_is_bit_identical(run_dirs):
    assert main(["train", "--config", str(run_dirs / "run" / "run_config.json"),
                 "--out", str(run_dirs / "again")]) == 0
    assert (run_dirs / "run" / "history.jsonl").read_bytes() == (run_dirs / "again" / "history.jsonl").read_bytes()
    for f in (run_dirs / "run" / "checkpoint").iterdir():
        assert f.read_bytes() == (run_dirs / "again" / "checkpoint" / f.name).read_bytes()


def test_config_for_other_command_rejected(run_dirs):
    assert main(["synth", "--config", str(run_dirs / "run" / "run_config.json"), "--out", "x"]) == 2


def test_eval_reports_metrics_and_dumps_attention(run_dirs, capsys):
    capsys.readouterr()
    rc = main(["eval", "--checkpoint", str(run_dirs / "run" / "checkpoint"), "--data", str(run_dirs / "test"),
               "--out", str(run_dirs / "metrics.json"), "--dump-attention", str(run_dirs / "att"),
               "--dump-count", "2"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert {"mAP", "CF1", "OF1", "CP-3", "OF1-3"} <= set(report)
    assert json.loads((run_dirs / "metrics.json").read_text()) == report
    maps = read_tensor(run_dirs / "att" / "000001.b0.msrnt")
    assert maps.shape == (8, 8, 8)
    assert abs(maps.sum(axis=(1, 2)) - 1).max() < 1e-12


def test_invalid_configuration_exits_2(run_dirs, tmp_path):
    assert main(["train", "--data", str(run_dirs / "train"), "--out", str(tmp_path / "r"), "--groups", "99"]) == 2
    assert main(["train", "--data", str(run_dirs / "train"), "--out", str(tmp_path / "r"), "--lr", "-1"]) == 2
    assert main(["synth", "--out", str(tmp_path / "s"), "--beta", "0.5"]) == 2


def test_runtime_failure_exits_1(run_dirs, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--data", str(run_dirs / "test")]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 1


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--components", "tanh", "softmax", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert "tanh" in out and "max relative error" in out


def test_ablate_smoke(tmp_path, capsys):
    rc = main(["ablate", "--table", "6", "--seeds", "1", "--images", "24", "--epochs", "1",
               "--branches", "1", "--out", str(tmp_path)])
    assert rc == 0
    medians = json.loads(capsys.readouterr().out)
    assert set(medians) == {"1", "2", "3", "4"}
    result = json.loads((tmp_path / "ablation.json").read_text())
    assert result["table"] == 6 and (tmp_path / "run_config.json").exists()
