"""Command-line interface: outputs, config resolution and exit codes."""

import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from bodynet.cli import (
    EXIT_DIVERGED,
    EXIT_GRADCHECK,
    EXIT_MISMATCH,
    EXIT_OK,
    EXIT_USAGE,
    main,
)

TINY = {
    "seed": 0,
    "train": {"lr": 1e-3, "batch_size": 16, "epochs": 2, "max_steps": 4},
    "data": {"stride": 25},
    "model": {"channels": [4, 4, 4, 4, 4, 4], "gru_hidden": 4, "d_loc": 4, "heads": 2, "h_loc": 4},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--mode", "MIXED", "--count", "5", "--duration", "20", "--seed", "1", "--out", str(root / "data")]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestSimulate:
    def test_identical_files_for_same_seed(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "simulate", "--mode", "DLW", "--duration", "15", "--seed", "4", "--out", tmp_path / name)[0] == 0
        for f in ("phone.csv", "watch.csv", "earbuds.csv", "truth.csv", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_bad_mode_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--mode", "JOG", "--out", str(tmp_path)])
        assert exc.value.code == EXIT_USAGE

    def test_dataset_layout(self, workspace):
        manifests = sorted((workspace / "data").rglob("manifest.json"))
        assert len(manifests) == 5
        modes = {json.loads(p.read_text())["mode"] for p in manifests}
        assert modes == {"STW", "PVW", "MVW", "DRW", "DLW"}


class TestIngest:
    def test_writes_windows(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "ingest", "--config", workspace / "tiny.json", "--data", workspace / "data", "--out", tmp_path / "w.npz")
        assert code == EXIT_OK and "config digest:" in out
        with np.load(tmp_path / "w.npz") as z:
            assert z["x"].shape[1:] == (3, 100, 6) and z["y"].shape == (len(z["x"]), 2)

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "ingest", "--data", tmp_path / "nothing")
        assert code == EXIT_USAGE and "does not exist" in err

    def test_malformed_file_names_line(self, workspace, tmp_path, capsys):
        shutil.copytree(workspace / "data", tmp_path / "data")
        victim = sorted((tmp_path / "data").rglob("watch.csv"))[0]
        lines = victim.read_text().splitlines()
        lines[5] = "0.5,1,2"
        victim.write_text("\n".join(lines) + "\n")
        code, _, err = run(capsys, "ingest", "--data", tmp_path / "data")
        assert code == EXIT_USAGE and "watch.csv:6" in err


class TestTrain:
    def test_outputs(self, workspace):
        run_dir = workspace / "run"
        for f in ("checkpoint.bin", "report.jsonl", "split.json", "config.json"):
            assert (run_dir / f).is_file()
        records = [json.loads(line) for line in (run_dir / "report.jsonl").read_text().splitlines()]
        assert records[-1]["type"] == "summary" and records[-1]["variant"] == "(6) C+W+A"

    def test_prints_digest_and_variant(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--config", workspace / "tiny.json", "--data", workspace / "data",
                           "--override", "ablation.attentive_la=false", "--out", tmp_path)
        assert code == EXIT_OK
        assert "config digest:" in out and "variant: (5) C+W" in out and "wall clock" in out

    def test_missing_data_path(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", workspace / "tiny.json", "--out", tmp_path)
        assert code == EXIT_USAGE and "no data path" in err

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", workspace / "tiny.json", "--override", "train.speed=2",
                           "--data", workspace / "data", "--out", tmp_path)
        assert code == EXIT_USAGE and "speed" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", workspace / "tiny.json", "--data", workspace / "data",
                           "--override", "train.lr=1e300", "--override", "train.max_steps=20", "--out", tmp_path)
        assert code == EXIT_DIVERGED and "diverged" in err

    def test_config_directory_lookup(self, workspace, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("BODYNET_CONFIG_DIR", str(workspace))
        code, out, _ = run(capsys, "ingest", "--config", "tiny.json", "--data", workspace / "data")
        assert code == EXIT_OK and "config digest:" in out


class TestEval:
    def test_metrics_and_cdf(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--checkpoint", workspace / "run" / "checkpoint.bin", "--data", workspace / "data",
                           "--baseline", "zero", "--baseline", "pdr", "--cdf", tmp_path / "cdf.csv", "--out", tmp_path)
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "metrics.json").read_text())
        methods = {row["method"] for row in doc["summary"]}
        assert methods == {"model", "zero", "pdr"}
        with open(tmp_path / "metrics.csv") as f:
            assert len(list(csv.DictReader(f))) >= 3
        with open(tmp_path / "cdf.csv") as f:
            probs = [float(r[1]) for r in list(csv.reader(f))[1:]]
        assert probs == sorted(probs) and probs[-1] == 1.0

    def test_mismatched_config(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--checkpoint", workspace / "run" / "checkpoint.bin", "--config", workspace / "tiny.json",
                           "--data", workspace / "data", "--override", "model.gru_hidden=8", "--out", tmp_path)
        assert code == EXIT_MISMATCH and "does not match" in err

    def test_corrupt_checkpoint(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes((workspace / "run" / "checkpoint.bin").read_bytes()[:100])
        code, _, _ = run(capsys, "eval", "--checkpoint", bad, "--data", workspace / "data", "--out", tmp_path)
        assert code == EXIT_MISMATCH

    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "none.bin", "--out", tmp_path)
        assert code == EXIT_USAGE


class TestTrace:
    def test_csv_columns(self, workspace, tmp_path, capsys):
        manifest = sorted((workspace / "data").rglob("manifest.json"))[0]
        code, _, _ = run(capsys, "trace", "--checkpoint", workspace / "run" / "checkpoint.bin", "--sequence", manifest,
                         "--out", tmp_path / "trace.csv")
        assert code == EXIT_OK
        with open(tmp_path / "trace.csv") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["t", "pred_x", "pred_y", "true_x", "true_y"]
        assert float(rows[0]["pred_x"]) == float(rows[0]["true_x"])


class TestGradcheck:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == EXIT_OK
        for name in ("linear", "conv1d_block", "batchnorm", "gru", "multihead_attention", "objective_variant_6"):
            assert name in out

    def test_corrupted_gradient_fails(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--corrupt", "gru")
        assert code == EXIT_GRADCHECK and "gru" in err


class TestAblate:
    def test_six_rows(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "ablate", "--config", workspace / "tiny.json", "--data", workspace / "data", "--out", tmp_path)
        assert code == EXIT_OK
        with open(tmp_path / "ablation.csv") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["variant"]) for r in rows] == [1, 2, 3, 4, 5, 6]
        assert all(r["status"] == "ok" for r in rows)
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [f"variant{k}.ckpt" for k in range(1, 7)]

    def test_variant_subset(self, workspace, tmp_path, capsys):
        code, _, _ = run(capsys, "ablate", "--config", workspace / "tiny.json", "--data", workspace / "data",
                         "--variants", "1,6", "--out", tmp_path)
        assert code == EXIT_OK
        with open(tmp_path / "ablation.csv") as f:
            assert [r["variant"] for r in csv.DictReader(f)] == ["1", "6"]

    def test_bad_variant_list(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--variants", "0,9", "--out", str(tmp_path)])
        assert exc.value.code == EXIT_USAGE


def test_console_script_reports_version():
    exe = shutil.which("bodynet")
    assert exe is not None
    res = subprocess.run([exe, "--version"], capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.startswith("bodynet ")
