import csv
import io
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from conftest import svd_tail
from filterbasis import zoo
from filterbasis.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, CommandConfig, ValidationFailure, main
from filterbasis.decomposer import split_and_flatten
from filterbasis.graph import ModelGraph, conv_layer
from filterbasis.model_io import load_model, save_model
from filterbasis.planner import LayerShape, count_params


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], stream=out)
    return code, out.getvalue()


def tree_bytes(path):
    path = Path(path)
    return {str(f.relative_to(path)): f.read_bytes() for f in sorted(path.rglob("*")) if f.is_file()}


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def total_row(text):
    return next(l for l in text.splitlines() if l.startswith("TOTAL")).split()


# ---------------------------------------------------------------- plan

def test_plan_edsr_shared_total():
    assert run("make-toy", "--preset", "edsr", "--out", "edsr")[0] == EXIT_OK
    code, text = run("plan", "--model", "edsr", "--m", 32, "--s", 1, "--share", "block", "--out", "planned")
    assert code == EXIT_OK
    row = total_row(text)
    assert "90112" in row and "7.6%" in row
    assert "sharing" in load_model("planned").meta


def test_plan_srresnet_unshared_total():
    run("make-toy", "--preset", "srresnet", "--out", "sr")
    code, text = run("plan", "--model", "sr", "--m", 14, "--s", 1)
    row = total_row(text)
    assert code == EXIT_OK and "17920" in row and "24.3%" in row


def test_plan_auto_split_csv():
    run("make-toy", "--preset", "edsr", "--out", "edsr")
    code, text = run("plan", "--model", "edsr", "--m", 32, "--s", "auto", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    layers = [r for r in rows if r["layer"] != "TOTAL"]
    assert code == EXIT_OK and {(r["s"], r["p"]) for r in layers} == {("4", "64")}


def test_plan_params_equal_planner():
    run("make-toy", "--preset", "tiny", "--out", "t")
    _, text = run("plan", "--model", "t", "--m", 5, "--s", 2, "--format", "csv")
    rows = [r for r in csv.DictReader(io.StringIO(text)) if r["layer"] != "TOTAL"]
    for r in rows:
        assert int(r["params"]) == count_params(LayerShape(8, 8, 3, 3), 5, 2).params_compressed


def test_plan_unplannable_split_is_validation_error(capsys):
    run("make-toy", "--preset", "tiny", "--out", "t")
    code, _ = run("plan", "--model", "t", "--m", 4, "--s", 3)
    assert code == EXIT_VALIDATION
    assert "block0.conv0" in capsys.readouterr().err


def test_auto_split_forbids_explicit_p():
    run("make-toy", "--preset", "tiny", "--out", "t")
    assert run("plan", "--model", "t", "--m", 4, "--s", "auto", "--p", 4)[0] == EXIT_VALIDATION
    with pytest.raises(ValidationFailure):
        CommandConfig("plan", s="auto", p=4)


def test_plan_with_split_depth():
    run("make-toy", "--preset", "tiny", "--out", "t")
    code, text = run("plan", "--model", "t", "--m", 4, "--p", 2, "--format", "csv")
    rows = [r for r in csv.DictReader(io.StringIO(text)) if r["layer"] != "TOTAL"]
    assert code == EXIT_OK and {(r["s"], r["p"]) for r in rows} == {("4", "2")}


# ---------------------------------------------------------------- decompose

def test_decompose_rank_sufficient_toy():
    # integer rank-3 factors keep the weights exactly rank 3 after float32 storage
    rng = np.random.default_rng(0)
    g = ModelGraph((6, 5, 5))
    for i in range(2):
        b, a = rng.integers(-2, 3, (54, 3)), rng.integers(-2, 3, (3, 6))
        conv_layer(g, f"conv{i}", (b @ a).T.reshape(6, 6, 3, 3).astype(float), pad=1)
    save_model(g, "low")
    run("plan", "--model", "low", "--m", 3, "--out", "p")
    code, text = run("decompose", "--model", "p", "--out", "c", "--format", "csv")
    residuals = [float(r["residual"]) for r in csv.DictReader(io.StringIO(text))]
    assert code == EXIT_OK and len(residuals) == 2 and max(residuals) < 1e-9


def test_decompose_random_toy_matches_svd_tail():
    run("make-toy", "--preset", "tiny", "--out", "t")
    run("plan", "--model", "t", "--m", 5, "--s", 2, "--out", "p")
    _, text = run("decompose", "--model", "p", "--out", "c", "--format", "csv")
    g = load_model("t")
    for r in csv.DictReader(io.StringIO(text)):
        w = g.params[g.layer(r["layer"]).params["weight"]]
        assert float(r["residual"]) == pytest.approx(svd_tail(split_and_flatten(w, 2).mat, 5), abs=1e-8)


def test_decompose_without_plan_is_actionable(capsys):
    run("make-toy", "--preset", "tiny", "--out", "t")
    code, _ = run("decompose", "--model", "t", "--out", "c")
    assert code == EXIT_VALIDATION
    assert "filterbasis plan" in capsys.readouterr().err


# ---------------------------------------------------------------- verify

def pipeline(m=4, s=2, share="block"):
    run("make-toy", "--preset", "tiny", "--out", "t")
    run("plan", "--model", "t", "--m", m, "--s", s, "--share", share, "--out", "p")
    return run("decompose", "--model", "p", "--out", "c")


def test_verify_fresh_decomposition_passes():
    pipeline()
    code, text = run("verify", "--model", "c")
    assert code == EXIT_OK and "PASS" in text.splitlines()[-1]


def test_verify_corrupted_coefficients_fails_with_layer(capsys):
    pipeline()
    path = Path("c/blobs/block1.conv0.coeffs.blob")
    data = bytearray(path.read_bytes())
    data[-4:] = struct.pack("<f", 50.0)
    path.write_bytes(bytes(data))
    code, text = run("verify", "--model", "c")
    assert code == EXIT_NUMERICAL
    assert "block1.conv0" in capsys.readouterr().err
    assert any(l.startswith("block1.conv0") and "FAIL" in l for l in text.splitlines())


def test_verify_exported_against_original():
    pipeline()
    run("export", "--model", "c", "--out", "e")
    assert run("verify", "--model", "e", "--original", "t")[0] == EXIT_OK


def test_verify_pointwise_only_model():
    g = ModelGraph((6, 4, 4))
    rng = np.random.default_rng(0)
    conv_layer(g, "pw0", rng.standard_normal((8, 6, 1, 1)))
    conv_layer(g, "pw1", rng.standard_normal((4, 8, 1, 1)))
    save_model(g, "pw")
    run("plan", "--model", "pw", "--m", 3, "--s", 2, "--out", "p")
    run("decompose", "--model", "p", "--out", "c")
    code, text = run("verify", "--model", "c")
    assert code == EXIT_OK and text.count("PASS") == 3


def test_verify_needs_decomposed_layers():
    run("make-toy", "--preset", "tiny", "--out", "t")
    assert run("verify", "--model", "t")[0] == EXIT_VALIDATION


# ---------------------------------------------------------------- train

def teacher_files(rank=3, m=3):
    teacher, x, y = zoo.teacher_student(rank=rank)
    save_model(teacher, "teacher")
    run("make-dataset", "--model", "teacher", "--out", "data.bin", "--samples", 16)
    run("plan", "--model", "teacher", "--m", m, "--out", "p")
    run("decompose", "--model", "p", "--out", "c")


def test_train_zero_epochs_leaves_model_byte_identical():
    teacher_files()
    code, _ = run("train", "--model", "c", "--dataset", "data.bin", "--epochs", 0, "--out", "t0")
    after = tree_bytes("t0")
    after.pop("train_report.jsonl")
    assert code == EXIT_OK and after == tree_bytes("c")


def test_train_gamma_zero_reports_zero_penalty():
    teacher_files(rank=6, m=3)
    code, _ = run("train", "--model", "c", "--dataset", "data.bin", "--epochs", 2,
                  "--gamma", 0, "--lr", 1e-3, "--out", "t")
    lines = [json.loads(l) for l in Path("t/train_report.jsonl").read_text().splitlines()]
    assert code == EXIT_OK and [l["penalty"] for l in lines[:-1]] == [0.0, 0.0]
    assert load_model("t").meta["loss"] == {"kind": "mse", "gamma": 0.0}


def test_train_teacher_student_reaches_low_mse():
    teacher_files()
    run("train", "--model", "c", "--dataset", "data.bin", "--epochs", 5, "--lr", 1e-2, "--out", "t")
    lines = [json.loads(l) for l in Path("t/train_report.jsonl").read_text().splitlines()]
    assert lines[-2]["data_loss"] < 1e-4
    assert run("verify", "--model", "t")[0] == EXIT_OK


def test_train_divergence_exit_code():
    teacher_files(rank=6, m=3)
    code, _ = run("train", "--model", "c", "--dataset", "data.bin", "--epochs", 3, "--lr", 1e4, "--out", "t")
    assert code == EXIT_NUMERICAL
    assert Path("t/train_report.jsonl").exists()


def test_train_requires_decomposed_model():
    teacher_files()
    assert run("train", "--model", "teacher", "--dataset", "data.bin", "--out", "t")[0] == EXIT_VALIDATION


# ---------------------------------------------------------------- report

def test_report_rows_and_ratio():
    pipeline(m=4, s=2, share="block")
    _, single = run("report", "--model", "c", "--format", "csv")
    assert len(list(csv.DictReader(io.StringIO(single)))) == 1
    _, plan_text = run("plan", "--model", "t", "--m", 4, "--s", 2, "--share", "block", "--format", "csv")
    total = next(r for r in csv.DictReader(io.StringIO(plan_text)) if r["layer"] == "TOTAL")
    _, text = run("report", "--model", "t", "--model", "c", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 2
    assert float(rows[1]["ratio"]) == pytest.approx(int(total["params"]) / 2304, abs=1e-12)
    assert int(rows[1]["params"]) == int(total["params"])


def test_report_without_models_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["report"])
    assert info.value.code == EXIT_VALIDATION


def test_missing_model_is_validation_error():
    assert run("report", "--model", "nowhere")[0] == EXIT_VALIDATION


# ---------------------------------------------------------------- determinism and logging

def test_commands_rerun_to_identical_files():
    outputs = []
    for tag in ("a", "b"):
        run("make-toy", "--preset", "tiny", "--out", f"t{tag}", "--seed", 3)
        run("plan", "--model", f"t{tag}", "--m", 4, "--s", 2, "--share", "block", "--out", f"p{tag}")
        run("decompose", "--model", f"p{tag}", "--out", f"c{tag}")
        run("make-dataset", "--model", f"t{tag}", "--out", f"d{tag}.bin", "--samples", 8, "--seed", 3)
        run("train", "--model", f"c{tag}", "--dataset", f"d{tag}.bin", "--epochs", 2, "--lr", 1e-3, "--out", f"x{tag}")
        outputs.append((tree_bytes(f"c{tag}"), tree_bytes(f"x{tag}"), Path(f"d{tag}.bin").read_bytes()))
    assert outputs[0] == outputs[1]


def test_basis_log_env(monkeypatch, capsys):
    import logging
    monkeypatch.setenv("BASIS_LOG", "debug")
    root = logging.getLogger()
    old = root.level
    try:
        run("make-toy", "--preset", "tiny", "--out", "t")
        assert logging.getLogger("filterbasis").getEffectiveLevel() == logging.DEBUG
    finally:
        root.setLevel(old)
