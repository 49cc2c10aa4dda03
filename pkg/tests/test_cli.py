import csv
import json

import pytest

from gmcml.cli import main
from gmcml.trainer import read_metrics


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def render(out, capsys, *extra):
    args = ["render", "--out", out, "--classes", 2, "--per-class", 6, "--test-per-class", 3, "--res", 16, "--seed", 5]
    code, _, err = run(args + list(extra), capsys)
    assert code == 0, err
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["render", "--out", str(out), "--classes", "2", "--per-class", "6", "--test-per-class", "3", "--res", "16", "--seed", "5"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--dataset", str(dataset), "--out", str(out), "--epochs", "1", "--batch", "6"]) == 0
    return out


def assert_one_line_error(err, code, expected_code):
    assert code == expected_code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("gmcml: error: ")


class TestRender:
    def test_deterministic(self, tmp_path, capsys):
        a = render(tmp_path / "a", capsys)
        b = render(tmp_path / "b", capsys)
        for split in ("train", "test"):
            assert (a / split / "meta.jsonl").read_bytes() == (b / split / "meta.jsonl").read_bytes()
            assert (a / split / "meta.jsonl").read_bytes()

    def test_both_modes(self, dataset):
        records = [json.loads(line) for line in (dataset / "train" / "meta.jsonl").read_text().splitlines()]
        assert {r["mode"] for r in records} == {"centered", "shifted"}
        assert len(records) == 2 * 2 * 6

    def test_test_split_disjoint(self, dataset):
        ids = lambda s: {json.loads(line)["seed"] for line in (dataset / s / "meta.jsonl").read_text().splitlines()}
        assert not ids("train") & ids("test")

    def test_single_mode_flat(self, tmp_path, capsys):
        code, _, _ = run(["render", "--out", tmp_path, "--classes", 2, "--per-class", 2, "--res", 16, "--modes", "shifted"], capsys)
        assert code == 0
        records = [json.loads(line) for line in (tmp_path / "meta.jsonl").read_text().splitlines()]
        assert {r["mode"] for r in records} == {"shifted"}

    def test_palette_limit(self, tmp_path, capsys):
        code, _, err = run(["render", "--out", tmp_path, "--classes", 13], capsys)
        assert_one_line_error(err, code, 1)
        assert "palette" in err and "13" in err

    @pytest.mark.parametrize("bad", [["--res", "0"], ["--modes", "sideways"], ["--per-class", "x"], []])
    def test_usage_errors(self, tmp_path, capsys, bad):
        argv = ["render"] + (["--out", str(tmp_path)] if bad else []) + bad
        code, _, err = run(argv, capsys)
        assert_one_line_error(err, code, 2)
        assert "usage" in err


class TestTrain:
    def test_one_epoch(self, trained):
        assert (trained / "checkpoint.npz").exists()
        rows = read_metrics(trained / "metrics.csv")
        assert len(rows) >= 1
        assert {r["stage"] for r in rows} == {"pretrain", "finetune"}

    def test_resume_continues_numbering(self, dataset, tmp_path, capsys):
        base = ["train", "--dataset", dataset, "--out", tmp_path, "--epochs", "2,1", "--batch", 6]
        assert run(base + ["--max-steps", 3], capsys)[0] == 0
        code, _, err = run(base + ["--resume", tmp_path / "checkpoint.npz"], capsys)
        assert code == 0, err
        steps = [r["step"] for r in read_metrics(tmp_path / "metrics.csv")]
        assert steps == list(range(len(steps))) and len(steps) > 3

    def test_fixed_noise(self, dataset, tmp_path, capsys):
        argv = ["train", "--dataset", dataset, "--out", tmp_path, "--epochs", 1, "--batch", 6, "--fixed-noise"]
        assert run(argv, capsys)[0] == 0
        rows = read_metrics(tmp_path / "metrics.csv")
        assert len({(r["r_rec"], r["r_cls"]) for r in rows}) == 1

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(["train", "--dataset", tmp_path / "nope", "--out", tmp_path], capsys)
        assert_one_line_error(err, code, 1)

    @pytest.mark.parametrize("bad", [["--epochs", "1,2,3"], ["--lr", "-1"], ["--optimizer", "lbfgs"]])
    def test_usage_errors(self, dataset, tmp_path, capsys, bad):
        code, _, err = run(["train", "--dataset", dataset, "--out", tmp_path] + bad, capsys)
        assert_one_line_error(err, code, 2)


class TestEval:
    def test_outputs(self, dataset, trained, tmp_path, capsys):
        argv = ["eval", "--checkpoint", trained / "checkpoint.npz", "--dataset", dataset, "--out", tmp_path]
        code, out, err = run(argv, capsys)
        assert code == 0, err
        assert "softmax accuracy" in out
        for name in ("report.csv", "proj2d.csv", "recon_grid.png", "manifold_grid.png", "proj2d.png", "confusion.png", "training.png"):
            assert (tmp_path / name).stat().st_size > 0, name
        n_test = 2 * 2 * 3
        with open(tmp_path / "proj2d.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "y", "category"] and len(rows) == n_test + 1

        assert run(argv, capsys)[0] == 0
        with open(tmp_path / "report.csv", newline="") as fh:
            reports = list(csv.DictReader(fh))
        assert len(reports) == 2 and reports[0]["run_id"] != reports[1]["run_id"]
        confusion = [int(v) for row in reports[0]["confusion"].split(";") for v in row.split()]
        assert sum(confusion) == n_test == int(reports[0]["n_test"])

    def test_resolution_mismatch(self, trained, tmp_path, capsys):
        render(tmp_path / "d", capsys, "--res", 24)
        code, _, err = run(["eval", "--checkpoint", trained / "checkpoint.npz", "--dataset", tmp_path / "d", "--out", tmp_path / "e"], capsys)
        assert_one_line_error(err, code, 1)
        assert "16" in err and "24" in err

    def test_class_mismatch(self, trained, tmp_path, capsys):
        render(tmp_path / "d", capsys, "--classes", 3)
        code, _, err = run(["eval", "--checkpoint", trained / "checkpoint.npz", "--dataset", tmp_path / "d", "--out", tmp_path / "e"], capsys)
        assert_one_line_error(err, code, 1)
        assert "model 2" in err and "dataset 3" in err

    def test_missing_checkpoint(self, dataset, tmp_path, capsys):
        code, _, err = run(["eval", "--checkpoint", tmp_path / "x.npz", "--dataset", dataset, "--out", tmp_path], capsys)
        assert_one_line_error(err, code, 1)
        assert "FileNotFoundError" in err

    def test_no_test_split(self, trained, tmp_path, capsys):
        run(["render", "--out", tmp_path / "flat", "--classes", 2, "--per-class", 2, "--res", 16], capsys)
        code, _, err = run(["eval", "--checkpoint", trained / "checkpoint.npz", "--dataset", tmp_path / "flat", "--out", tmp_path / "e"], capsys)
        assert_one_line_error(err, code, 1)
        assert "test split" in err


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "gmcml", "render"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.count("\n") == 1 and proc.stderr.startswith("gmcml: error: usage")
