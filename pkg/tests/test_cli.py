import json
import os

import numpy as np
import pytest

from mono3d.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main
from mono3d.depthbin import DepthTargetMap
from mono3d.tensor import save_tensor
from oracles import ap40_staircase

LABELS = (
    "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n"
    "Car 0.00 0 1.62 300.00 170.00 380.00 230.00 1.50 1.60 3.90 -8.00 1.70 20.00 1.25\n"
    "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n"
)


def write(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return str(path)


def test_gradcheck_passes_and_lists_errors(capsys):
    code = main(["gradcheck", "--only", "add", "--only", "dfe", "--set", "gc_seeds=2"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "add" in out and "dfe" in out and "max_rel_err" in out


def test_corrupted_gradient_fails_naming_the_op(capsys):
    code = main(["gradcheck", "--only", "sigmoid", "--corrupt", "sigmoid", "--set", "gc_seeds=2"])
    out = capsys.readouterr().out
    assert code == EXIT_FAIL
    assert "FAILED: sigmoid" in out


def test_global_options_work_before_or_after_the_subcommand(capsys):
    assert main(["--seed", "3", "gradcheck", "--only", "exp", "--set", "gc_seeds=1"]) == EXIT_OK
    assert main(["gradcheck", "--seed", "3", "--only", "exp", "--set", "gc_seeds=1"]) == EXIT_OK


def test_bench_refuses_parallel(capsys):
    assert main(["bench", "--parallel"]) == EXIT_INPUT
    assert "parallel" in capsys.readouterr().err


def test_bench_emits_one_row_per_size_and_kind(tmp_path):
    out = tmp_path / "bench.csv"
    code = main(["bench", "--set", "bench_sizes=16,32,64,128", "--set", "bench_dim=16", "--set", "bench_heads=2", "--set", "bench_runs=1", "--out", str(out)])
    assert code == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].startswith("#") and "136 ms" in lines[0]
    data = [ln for ln in lines if ln and not ln.startswith("#")][1:]
    assert len(data) == 8
    assert {ln.split(",")[1] for ln in data} == {"vanilla", "linear"}


def test_unknown_key_and_bad_usage_exit_two(capsys):
    assert main(["gradcheck", "--set", "nope=1"]) == EXIT_INPUT
    assert main(["frobnicate"]) == EXIT_INPUT
    assert main([]) == EXIT_INPUT


def test_config_file_is_read(tmp_path, capsys):
    cfg = write(tmp_path / "run.cfg", "gc_seeds=1\ngc_tol=1e-3\n")
    assert main(["gradcheck", "--config", cfg, "--only", "neg"]) == EXIT_OK
    assert "tol 0.001" in capsys.readouterr().out
    assert main(["gradcheck", "--config", str(tmp_path / "missing.cfg")]) == EXIT_INPUT


def make_dirs(tmp_path):
    det, gt = tmp_path / "det", tmp_path / "gt"
    det.mkdir()
    gt.mkdir()
    return det, gt


def test_eval_gt_as_detections_scores_one(tmp_path, capsys):
    det, gt = make_dirs(tmp_path)
    scored = "".join(ln + " 1.0000\n" for ln in LABELS.splitlines())
    for name in ("000000.txt", "000001.txt"):
        write(gt / name, LABELS)
        write(det / name, scored)
    out = tmp_path / "report.json"
    assert main(["eval", str(det), str(gt), "--out", str(out), "--parallel"]) == EXIT_OK
    rows = json.loads(out.read_text())
    car = [r for r in rows if r["class"] == "Car"]
    assert len(car) == 3 and all(r["ap"] == 1.0 for r in car)
    assert all(r["ap"] is None for r in rows if r["class"] != "Car")


def test_eval_empty_detections_score_zero(tmp_path, capsys):
    det, gt = make_dirs(tmp_path)
    write(gt / "000000.txt", LABELS)
    out = tmp_path / "report.json"
    assert main(["eval", str(det), str(gt), "--out", str(out)]) == EXIT_OK
    assert all(r["ap"] == 0.0 for r in json.loads(out.read_text()) if r["class"] == "Car")


def test_eval_mixed_fixture_matches_staircase(tmp_path, capsys):
    det, gt = make_dirs(tmp_path)
    cars = LABELS.splitlines()[:2]
    far = "Car 0.00 0 0.00 800.00 160.00 850.00 200.00 1.50 1.60 3.90 9.00 1.70 30.00 0.30"
    write(gt / "a.txt", "\n".join(cars + [far]) + "\n")
    miss = "Car 0.00 0 0.00 100.00 100.00 150.00 140.00 1.50 1.60 3.90 -20.00 1.70 25.00 0.00"
    write(det / "a.txt", "\n".join([cars[0] + " 0.9000", miss + " 0.8000", far + " 0.6000", cars[1] + " 0.3000"]) + "\n")
    out = tmp_path / "report.json"
    assert main(["eval", str(det), str(gt), "--out", str(out)]) == EXIT_OK
    expected = ap40_staircase([True, False, True, True], 3)
    for r in json.loads(out.read_text()):
        if r["class"] == "Car":
            assert abs(r["ap"] - expected) < 1e-12


def test_eval_rejects_malformed_detections(tmp_path, capsys):
    det, gt = make_dirs(tmp_path)
    write(gt / "a.txt", LABELS)
    write(det / "a.txt", "Car 0 0\n")
    assert main(["eval", str(det), str(gt)]) == EXIT_INPUT
    assert "a.txt:1:" in capsys.readouterr().err


def test_inspect_labels_prints_one_row_per_object(tmp_path, capsys):
    path = write(tmp_path / "labels.txt", LABELS)
    assert main(["inspect", path]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert sum(1 for ln in out if ln.split()[:2] in (["0", "Car"], ["1", "Car"], ["2", "DontCare"])) == 3
    assert "3 objects" in out


def test_inspect_malformed_reports_line_and_column(tmp_path, capsys):
    path = write(tmp_path / "bad.txt", LABELS + "Car 0 0 x 1 1 2 2 1 1 1 0 0 5 0\n")
    assert main(["inspect", path]) == EXIT_INPUT
    assert "bad.txt:4:9:" in capsys.readouterr().err


def test_inspect_calib(tmp_path, capsys):
    path = write(tmp_path / "calib.txt", "P2: 700 0 600 0 0 700 180 0 0 0 1 0\n")
    assert main(["inspect", path]) == EXIT_OK
    assert "fx=700.0000" in capsys.readouterr().out


def test_inspect_dbin_histogram(tmp_path, capsys):
    bins = np.array([[0, 3, -1], [3, 3, -1]])
    path = write(tmp_path / "map.dbin", DepthTargetMap(bins, 8).to_text())
    assert main(["inspect", path]) == EXIT_OK
    out = capsys.readouterr().out
    assert "invalid=2" in out
    assert "bin    3:      3" in out and "bin    0:      1" in out


def test_inspect_tensor(tmp_path, capsys):
    path = str(tmp_path / "t.tnsr")
    save_tensor(path, np.arange(6.0).reshape(2, 3))
    assert main(["inspect", path]) == EXIT_OK
    assert "shape=(2, 3)" in capsys.readouterr().out


def test_inspect_truncated_tensor_is_input_error(tmp_path, capsys):
    path = tmp_path / "t.tnsr"
    save_tensor(str(path), np.ones(4))
    path.write_bytes(path.read_bytes()[:-3])
    assert main(["inspect", str(path)]) == EXIT_INPUT


def test_train_toy_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-toy", "--set", "steps=3", "--out", str(out)]) == EXIT_OK
    for name in ("config.txt", "loss_curve.csv", "checkpoint.npz", "eval.json"):
        assert os.path.exists(out / name)
    curve = (out / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "step,total,cls,reg,dep,lr" and len(curve) == 4
    assert "C=32" in (out / "config.txt").read_text()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_toy_non_finite_loss_dumps_diagnostics(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-toy", "--set", "steps=3", "--set", "lr=1e300", "--out", str(out)]) == EXIT_FAIL
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["step"] >= 1 and "max_abs_param" in diag
