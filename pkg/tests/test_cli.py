import numpy as np
import pytest

from mbcliquenet.cli import main

TRAIN = ["train", "--preset", "tiny", "--dataset", "synthetic", "--synthetic-samples", "48",
         "--epochs", "2", "--batch-size", "16", "--seed", "7"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(TRAIN + ["--out", str(out)]) == 0
    return out


class TestTrain:
    def test_outputs(self, run_dir):
        for name in ("metrics.csv", "timing.csv", "ledger.csv", "compression.csv", "config.txt",
                     "model.mbcq", "checkpoint-epoch0002.mbcq"):
            assert (run_dir / name).exists(), name
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,train_loss,train_acc,test_loss,test_acc"
        assert len(lines) == 3

    def test_deterministic(self, run_dir, tmp_path):
        assert main(TRAIN + ["--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()

    def test_config_echo(self, run_dir):
        text = (run_dir / "config.txt").read_text()
        assert "seed = 7" in text and "widths = 8,8" in text

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "net.cfg"
        cfg.write_text("widths = 4,4\nlayers = 2\nk = 2\nbatch_size = 8\n")
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--dataset", "synthetic", "--synthetic-samples",
                     "16", "--epochs", "1", "--k", "4", "--out", str(out)]) == 0
        text = (out / "config.txt").read_text()
        assert "k = 4,4" in text and "widths = 4,4" in text

    def test_resume(self, run_dir, tmp_path):
        out = tmp_path / "r"
        assert main(TRAIN[:7] + ["--epochs", "1", "--batch-size", "16", "--seed", "7", "--out", str(out)]) == 0
        assert main(TRAIN + ["--out", str(out), "--resume", str(out / "model.mbcq")]) == 0
        assert (out / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


class TestArchiveCommands:
    def test_export_then_eval(self, run_dir, tmp_path, capsys):
        args = ["--dataset", "synthetic", "--synthetic-samples", "48", "--seed", "7"]
        assert main(["eval", "--model", str(run_dir / "model.mbcq")] + args) == 0
        train_line = capsys.readouterr().out.strip().splitlines()[-1]
        assert main(["export", "--model", str(run_dir / "model.mbcq"), "--out", str(tmp_path)]) == 0
        assert "binarized-packed" in capsys.readouterr().out
        assert main(["eval", "--model", str(tmp_path / "deploy.mbcq"), "--out", str(tmp_path)] + args) == 0
        deploy_line = capsys.readouterr().out.strip().splitlines()[-1]
        assert train_line.split(" mode=")[0] == deploy_line.split(" mode=")[0]
        assert deploy_line.endswith("mode=deploy")
        assert (tmp_path / "eval.csv").exists()

    def test_resume_from_deploy_fails(self, run_dir, tmp_path, capsys):
        main(["export", "--model", str(run_dir / "model.mbcq"), "--out", str(tmp_path)])
        capsys.readouterr()
        code = main(TRAIN + ["--out", str(tmp_path / "x"), "--resume", str(tmp_path / "deploy.mbcq")])
        assert code == 1
        assert "deploy-only archive" in capsys.readouterr().err

    def test_inspect(self, run_dir, capsys):
        assert main(["inspect", "--model", str(run_dir / "model.mbcq")]) == 0
        out = capsys.readouterr().out
        assert "binary_3x3" in out and "total" in out

    def test_inspect_preset(self, capsys):
        assert main(["inspect", "--preset", "cifar"]) == 0
        assert "4524480" in capsys.readouterr().out


class TestBenchAndGradCheck:
    def test_bench_k(self, tmp_path, capsys):
        assert main(["bench-k", "--preset", "cifar-small", "--repeats", "0", "--conv-batch", "1",
                     "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "bench_k.csv").read_text().splitlines()[1:]
        totals = [int(r.split(",")[1]) for r in rows]
        assert [int(r.split(",")[0]) for r in rows] == [2, 4, 8]
        assert totals[0] > totals[1] > totals[2]
        out = capsys.readouterr().out
        assert "without M-filters: residual=0" in out
        conv = (tmp_path / "bench_conv.csv").read_text().splitlines()
        assert len(conv) == 4
        assert all(float(r.split(",")[-1]) < 1e-5 for r in conv[1:])

    def test_grad_check(self, capsys):
        assert main(["grad-check"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "m_filter" in out


class TestErrors:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code != 0

    def test_missing_archive(self, tmp_path, capsys):
        assert main(["eval", "--model", str(tmp_path / "none.mbcq"), "--dataset", "synthetic"]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("widths 8\n")
        assert main(["inspect", "--config", str(cfg)]) == 1
        assert "expected 'key = value'" in capsys.readouterr().err

    def test_dataset_error_names_file(self, tmp_path, capsys):
        (tmp_path / "train-images-idx3-ubyte").write_bytes(b"\x00\x00\x08\x04")
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(b"")
        code = main(["train", "--preset", "mnist-small", "--dataset", "mnist", "--data-dir",
                     str(tmp_path), "--epochs", "1", "--out", str(tmp_path / "o")])
        assert code == 1
        assert "train-images-idx3-ubyte" in capsys.readouterr().err
