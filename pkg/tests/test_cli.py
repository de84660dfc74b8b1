import json
import subprocess
import sys

import pytest

from dcft.adapters import count_params, preset_targets, target_shapes
from dcft.cli import main
from dcft.data import to_csv, token_majority

FAST = ["--epochs", "1", "--train.max_steps", "3"]


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_writes_artifacts(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--d", "8", "--s", "8", "--targets", "all", "--out", "r", *FAST)
    assert code == 0
    assert "config-hash:" in out
    lines = (tmp_path / "r" / "epochs.jsonl").read_text().splitlines()
    head, final = json.loads(lines[0]), json.loads(lines[-1])
    assert head["config"]["train"]["d"] == 8
    shapes = target_shapes(16, 32)
    expected = count_params([(t, *shapes[t]) for t in shapes], 8, 8, 1, 2).total_params
    assert final["final"]["trainable_params"] == expected
    summary = (tmp_path / "r" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("config_hash") and len(summary) == 2
    assert (tmp_path / "r" / "model.ckpt").exists() and (tmp_path / "r" / "adapters.ckpt").exists()


def test_stride_above_kernel_rejected_before_training(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--s", "12", "--d", "8", "--out", "r")
    assert code == 2 and "stride" in err
    assert not (tmp_path / "r").exists()


def test_error_taxonomy(capsys, tmp_path):
    assert run(capsys, "train", "--dataset", "missing.csv", "--out", "r")[0] == 4
    assert run(capsys, "train", "--d", "7", "--s", "7", "--out", "r")[0] == 3
    assert run(capsys, "train", "--targets", "Q,Z")[0] == 2
    assert run(capsys, "train", "--config", "absent.ini")[0] == 2
    assert not (tmp_path / "r").exists()


def test_csv_dataset_and_eval(capsys, tmp_path):
    (tmp_path / "d.csv").write_text(to_csv(token_majority(40, seed=2)))
    assert run(capsys, "train", "--dataset", "d.csv", "--out", "r", *FAST)[0] == 0
    code, out, _ = run(capsys, "eval", "r/model.ckpt", "--dataset", "d.csv")
    assert code == 0 and "accuracy:" in out and "(40 examples)" in out


def test_merge_then_eval_matches(capsys):
    assert run(capsys, "train", "--out", "r", "--train.init_std", "0.3", *FAST)[0] == 0
    _, before, _ = run(capsys, "eval", "r/model.ckpt")
    assert run(capsys, "merge", "r/model.ckpt", "--out", "m.ckpt")[0] == 0
    _, after, _ = run(capsys, "eval", "m.ckpt")
    assert before == after


def test_report_params_preset(capsys, tmp_path):
    code, out, _ = run(capsys, "report-params", "--arch", "deberta-base-like", "--d", "8", "--s", "8",
                       "--targets", "all", "--csv", "b.csv")
    assert code == 0 and "total trainable: 25344" in out
    assert (tmp_path / "b.csv").read_text().startswith("target,")
    _, out, _ = run(capsys, "report-params", "--arch", "deberta-base-like", "--d", "8", "--s", "8", "--targets", "Q,K")
    assert "total trainable: 6144" in out
    _, out, _ = run(capsys, "report-params", "--arch", "toy", "--d", "8", "--s", "8")
    shapes = target_shapes(16, 32)
    assert f"total trainable: {count_params([(t, *shapes[t]) for t in shapes], 8, 8, 1, 2).total_params}" in out


def test_degenerate_kernel_count():
    targets, _ = preset_targets("deberta-base-like", ("Q",))
    assert count_params(targets, 1, 1, 1).per_layer == 768 + 768 + 1


def test_report_params_sweep_states_exclusions(capsys):
    code, out, _ = run(capsys, "report-params", "--sweep-d", "2,5,8")
    assert code == 0
    assert "configs needing padding (excluded): d=5,s=5" in out
    _, out, _ = run(capsys, "report-params", "--sweep-d", "2,4,6,8,12")
    assert "excluded): none" in out and "strictly decreasing over valid configs: True" in out


def test_coverage(capsys, tmp_path):
    code, out, _ = run(capsys, "coverage", "--d", "8", "--s", "8", "--dims", "64x64", "--pgm", "c.pgm")
    assert code == 0 and "uniform" in out and "non-uniform" not in out
    assert (tmp_path / "c.pgm").read_text().startswith("P2")
    _, out, _ = run(capsys, "coverage", "--d", "4", "--s", "2", "--dims", "64x64")
    assert "non-uniform" in out and "1..4" in out
    assert run(capsys, "coverage", "--dims", "64by64")[0] == 2


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--d", "2", "--s", "2")
    assert code == 0 and "passed" in out
    # an unusable finite-difference step cannot meet the tolerance
    code, _, err = run(capsys, "gradcheck", "--d", "2", "--s", "2", "--eps", "1e-1", "--model.num_layers", "1")
    assert code == 5 and "FAILED" in err


def test_efficiency_and_datagen(capsys, tmp_path):
    assert run(capsys, "datagen", "--n", "24", "--output", "g.csv")[0] == 0
    code, out, _ = run(capsys, "efficiency", "--d-values", "2,4", "--dataset", "g.csv", "--out", "e", *FAST)
    assert code == 0 and (tmp_path / "e" / "efficiency.csv").exists()
    assert len((tmp_path / "e" / "efficiency.csv").read_text().splitlines()) == 3


def test_config_file_and_flag_precedence(capsys, tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nd = 4\ns = 4\nepochs = 1\nmax_steps = 2\n[run]\nout = fromfile\n")
    assert run(capsys, "train", "--config", "c.ini", "--s", "2")[0] == 0
    head = json.loads((tmp_path / "fromfile" / "epochs.jsonl").read_text().splitlines()[0])
    assert (head["config"]["train"]["d"], head["config"]["train"]["s"]) == (4, 2)


def test_console_script_reports_without_traceback(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "dcft.cli", "eval", str(tmp_path / "missing.ckpt")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 4
    assert "Traceback" not in proc.stderr and "not found" in proc.stderr
