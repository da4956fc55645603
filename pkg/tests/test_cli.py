import csv
import subprocess
import sys

import numpy as np
import pytest

from oocboost.cli import main, parse_size
from oocboost.ingest import PageSet
from oocboost.pagestore import EllpackStore

TEN_LINES = """1 1:0.5 3:1.2
0 2:3.1
1 1:0.7 2:0.1 3:2.2
0 3:0.3
1 1:1.5
0 2:2.2 3:0.9
1 1:0.2 2:0.4
0 1:3.3 3:1.1
1 2:0.8
0 1:0.9 2:1.9 3:0.4
"""


@pytest.fixture
def ten(tmp_path):
    path = tmp_path / "ten.libsvm"
    path.write_text(TEN_LINES)
    return path


@pytest.fixture
def synthetic_file(tmp_path):
    """Learnable 3000-row LibSVM file."""
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3000, 6))
    y = (X[:, 0] + 0.5 * X[:, 1] * X[:, 2] + 0.3 * rng.normal(size=3000) > 0).astype(int)
    path = tmp_path / "syn.libsvm"
    with path.open("w") as fh:
        for yi, row in zip(y, X):
            fh.write(f"{yi} " + " ".join(f"{j + 1}:{v:.6g}" for j, v in enumerate(row)) + "\n")
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_convert_ten_lines(ten, tmp_path, capsys):
    assert run("convert", "--input", ten, "--out", tmp_path / "c") == 0
    out = capsys.readouterr().out
    assert "rows=10" in out and "csr_pages=1" in out and "ellpack_pages=1" in out
    assert EllpackStore.open(tmp_path / "c" / "ellpack").n_rows == 10


def test_convert_small_pages(ten, tmp_path):
    assert run("convert", "--input", ten, "--out", tmp_path / "c", "--page-bytes", 256) == 0
    csr = PageSet.open(tmp_path / "c" / "csr")
    ell = EllpackStore.open(tmp_path / "c" / "ellpack")
    assert csr.page_count > 1 and sum(csr.page_rows) == 10
    assert sum(ell.page_rows) == 10 and all(b <= 256 for b in ell.page_bytes)


def test_convert_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.libsvm"
    assert run("convert", "--input", missing, "--out", tmp_path / "c") == 2
    assert str(missing) in capsys.readouterr().err


def test_convert_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.libsvm"
    bad.write_text("1 1:0.5\n0 2:x\n")
    assert run("convert", "--input", bad, "--out", tmp_path / "c") == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(ten, tmp_path):
    with pytest.raises(SystemExit) as info:
        run("convert", "--input", ten, "--out", tmp_path / "c", "--bogus")
    assert info.value.code == 2


def test_train_zero_rounds(ten, tmp_path):
    run("convert", "--input", ten, "--out", tmp_path / "c")
    code = run("train", "--input", tmp_path / "c", "--out", tmp_path / "m.bin", "--nrounds", 0,
               "--metrics-out", tmp_path / "metrics.csv")
    assert code == 0
    rows = list(csv.reader((tmp_path / "metrics.csv").open()))
    assert rows == [["iteration", "train_logloss", "eval_logloss", "eval_auc", "elapsed_ms"]]
    assert run("predict", "--input", ten, "--model", tmp_path / "m.bin", "--out", tmp_path / "p.txt",
               "--output", "margin") == 0
    assert (tmp_path / "p.txt").read_text().split() == ["0"] * 10


def test_train_budget_modes(synthetic_file, tmp_path, capsys):
    conv = tmp_path / "c"
    run("convert", "--input", synthetic_file, "--out", conv, "--page-bytes", "4KiB", "--max-bin", 64)
    store = EllpackStore.open(conv / "ellpack")
    # the matrix alone fits, but not together with full gradients, partition and histograms
    budget = 2 * store.total_bytes
    assert run("train", "--input", conv, "--out", tmp_path / "m.bin", "--mode", "in_core",
               "--memory-budget", budget, "--nrounds", 2) == 3
    assert "--subsample" in capsys.readouterr().err
    assert run("train", "--input", conv, "--out", tmp_path / "m.bin", "--memory-budget", budget,
               "--subsample", 0.1, "--sampling-method", "mvs", "--nrounds", 3, "--max-depth", 3) == 0
    assert "trees=3" in capsys.readouterr().out


def test_train_split_reports_auc(synthetic_file, tmp_path, capsys):
    assert run("train", "--input", synthetic_file, "--out", tmp_path / "m.bin", "--split", 0.8,
               "--nrounds", 5, "--metrics-out", tmp_path / "m.csv") == 0
    out = capsys.readouterr().out
    auc = float(out.split("eval_auc=")[1])
    assert auc > 0.7
    rows = list(csv.reader((tmp_path / "m.csv").open()))
    assert len(rows) == 6 and float(rows[-1][3]) == pytest.approx(auc, abs=1e-6)


@pytest.mark.parametrize("flags", [["--eta", "0"], ["--subsample", "1.5"], ["--goss-b", "0.5"],
                                   ["--sampling-method", "goss", "--goss-a", "0.7", "--goss-b", "0.5"]])
def test_train_invalid_flags(ten, tmp_path, flags):
    with pytest.raises(SystemExit) as info:
        run("train", "--input", ten, "--out", tmp_path / "m.bin", *flags)
    assert info.value.code == 2


def test_predict_outputs(synthetic_file, tmp_path):
    model = tmp_path / "m.bin"
    assert run("train", "--input", synthetic_file, "--out", model, "--nrounds", 5) == 0
    assert run("predict", "--input", synthetic_file, "--model", model, "--out", tmp_path / "p.txt") == 0
    assert run("predict", "--input", synthetic_file, "--model", model, "--out", tmp_path / "m.txt",
               "--output", "margin") == 0
    p = np.loadtxt(tmp_path / "p.txt")
    m = np.loadtxt(tmp_path / "m.txt")
    assert len(p) == 3000 and np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(1 / (1 + np.exp(-m)), p, atol=1e-7)


def test_predict_empty_input(synthetic_file, tmp_path):
    model = tmp_path / "m.bin"
    run("train", "--input", synthetic_file, "--out", model, "--nrounds", 1)
    empty = tmp_path / "empty.libsvm"
    empty.write_text("")
    assert run("predict", "--input", empty, "--model", model, "--out", tmp_path / "p.txt") == 0
    assert (tmp_path / "p.txt").read_text() == ""


def test_predict_feature_mismatch(ten, synthetic_file, tmp_path):
    model = tmp_path / "m.bin"
    run("train", "--input", ten, "--out", model, "--nrounds", 1)
    with pytest.raises(SystemExit) as info:
        run("predict", "--input", synthetic_file, "--model", model)
    assert info.value.code == 2


def test_predict_corrupt_model(ten, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"OOCM\x01")
    assert run("predict", "--input", ten, "--model", bad) == 4


def test_inspect(ten, tmp_path, capsys):
    run("convert", "--input", ten, "--out", tmp_path / "c")
    run("train", "--input", tmp_path / "c", "--out", tmp_path / "m.bin", "--nrounds", 2)
    capsys.readouterr()
    assert run("inspect", "--input", tmp_path / "c", "--max-rows", 2) == 0
    out = capsys.readouterr().out
    assert "rows=10" in out and "row 0: 0:" in out and "per-feature bin counts" in out
    assert run("inspect", "--input", tmp_path / "m.bin") == 0
    assert "trees=2" in capsys.readouterr().out
    assert run("inspect", "--input", tmp_path / "c" / "ellpack" / "page_00000.ell") == 0
    assert "row_stride=3" in capsys.readouterr().out
    assert run("inspect", "--input", tmp_path / "c" / "csr") == 0
    assert "CSR page set" in capsys.readouterr().out


def test_bench_small_and_deterministic(tmp_path, capsys):
    argv = ["bench", "--memory-budget", "2MiB", "--num-features", 8, "--max-depth", 3,
            "--resolution", 0.2]
    assert run(*argv) == 0
    first = capsys.readouterr().out
    assert run(*argv) == 0
    assert capsys.readouterr().out == first
    rows = {line.split()[0]: line.split() for line in first.splitlines()[2:]}
    assert set(rows) == {"in_core", "out_of_core"} or len(first.splitlines()) == 5
    counts = [int(line.split()[-2]) for line in first.splitlines()[2:]]
    assert counts[1] >= counts[0] and counts[2] >= counts[0]


@pytest.mark.parametrize("text,value", [("67108864", 1 << 26), ("64MiB", 1 << 26), ("64M", 1 << 26),
                                        ("4KiB", 4096), ("1.5GB", 3 << 29)])
def test_parse_size(text, value):
    assert parse_size(text) == value


@pytest.mark.parametrize("text", ["", "abc", "0", "12XB"])
def test_parse_size_rejects(text):
    with pytest.raises(Exception):
        parse_size(text)


def test_module_entry_point(ten, tmp_path):
    res = subprocess.run([sys.executable, "-m", "oocboost", "convert", "--input", str(ten),
                          "--out", str(tmp_path / "c")], capture_output=True, text=True)
    assert res.returncode == 0 and "rows=10" in res.stdout
