"""CLI behavior: exit codes, JSON outputs, end-to-end subcommand flows."""

import json

import numpy as np
import pytest

from vidlang.cli import main
from vidlang.models.retrieval import SimilarityMatrix


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = main(
        [
            "gen", "--out", str(out), "--seed", "3",
            "--set", "train_clips=6", "--set", "val_clips=2", "--set", "test_clips=2",
            "--set", "candidate_count=6", "--set", "frames=3",
        ]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(
        [
            "train", "--task", "desc", "--data", str(data_dir), "--out", str(out),
            "--set", "epochs=1", "--set", "hidden=8", "--set", "embed_dim=6",
            "--set", "depth=1", "--set", "attn_channels=3", "--set", "candidates=6",
            "--set", "batch_size=4",
        ]
    )
    assert code == 0
    return out


class TestExitCodes:
    def test_no_arguments_prints_help_and_exits_one(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().out.lower()

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["eval", "--metric", "recall", "--frobnicate"]) == 1

    def test_missing_matrix_file_is_data_error(self, tmp_path):
        missing = tmp_path / "nope.ctsn"
        assert main(["eval", "--metric", "recall", "--matrix", str(missing)]) == 2

    def test_corrupt_matrix_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.ctsn"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--metric", "medr", "--matrix", str(bad)]) == 2


class TestEval:
    def test_recall_on_perfect_matrix_prints_one(self, tmp_path, capsys):
        n = 4
        scores = np.eye(n, dtype=np.float32) * 9 + 0.1
        SimilarityMatrix([f"c{i}" for i in range(n)], [f"c{i}" for i in range(n)], scores).save(
            tmp_path / "m.ctsn"
        )
        code = main(["eval", "--metric", "recall", "--k", "1", "--matrix", str(tmp_path / "m.ctsn")])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["value"] == 1.0
        assert report["k"] == 1
        assert "metadata" in report and "seed" in report["metadata"]

    def test_accuracy_from_files(self, tmp_path, capsys):
        (tmp_path / "pred.txt").write_text("a\nb\nc\n")
        (tmp_path / "gold.txt").write_text("a\nx\nc\n")
        code = main(
            [
                "eval", "--metric", "acc",
                "--pred", str(tmp_path / "pred.txt"),
                "--gold", str(tmp_path / "gold.txt"),
            ]
        )
        assert code == 0
        assert json.loads(capsys.readouterr().out)["value"] == pytest.approx(2 / 3)

    def test_bleu_from_files(self, tmp_path, capsys):
        (tmp_path / "pred.txt").write_text("the cat sat\n")
        (tmp_path / "gold.txt").write_text("the cat sat\n")
        code = main(
            [
                "eval", "--metric", "bleu", "--n", "2",
                "--pred", str(tmp_path / "pred.txt"),
                "--gold", str(tmp_path / "gold.txt"),
            ]
        )
        assert code == 0
        assert json.loads(capsys.readouterr().out)["value"] == pytest.approx(1.0)


class TestPipeline:
    def test_gen_writes_dataset(self, data_dir):
        assert (data_dir / "manifest.jsonl").exists()
        assert (data_dir / "candidates.txt").exists()
        assert (data_dir / "features").is_dir()

    def test_train_writes_artifacts(self, trained_dir):
        assert (trained_dir / "checkpoint.ctsn").exists()
        assert (trained_dir / "metrics.csv").exists()
        run = json.loads((trained_dir / "run.json").read_text())
        assert run["task"] == "desc"
        assert "config_hash" in run["metadata"]

    def test_detect_emits_json_lines(self, data_dir, trained_dir, capsys):
        code = main(
            [
                "detect", "--data", str(data_dir),
                "--checkpoint", str(trained_dir / "checkpoint.ctsn"),
                "--split", "test", "--k", "2",
            ]
        )
        assert code == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        assert len(lines) == 2
        row = json.loads(lines[0])
        assert "clip_id" in row
        assert len(row["words"]) == 2
        assert {"word", "confidence"} <= set(row["words"][0])

    def test_simmatrix_then_eval_and_ensemble(self, data_dir, tmp_path, capsys):
        run_dir = tmp_path / "ret_run"
        code = main(
            [
                "train", "--task", "ret", "--data", str(data_dir), "--out", str(run_dir),
                "--set", "epochs=1", "--set", "hidden=8", "--set", "embed_dim=6",
                "--set", "depth=1", "--set", "attn_channels=3", "--set", "candidates=6",
                "--set", "batch_size=4", "--set", "sketch_dim=16", "--set", "maxout_dim=6",
            ]
        )
        assert code == 0
        matrix_path = tmp_path / "sims.ctsn"
        code = main(
            [
                "simmatrix", "--task", "ret", "--data", str(data_dir),
                "--checkpoint", str(run_dir / "checkpoint.ctsn"),
                "--split", "test", "--out", str(matrix_path),
            ]
        )
        assert code == 0
        capsys.readouterr()
        code = main(
            [
                "eval", "--metric", "medr", "--matrix", str(matrix_path),
                "--queries-on", "cols",
            ]
        )
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["value"] >= 1
        out_path = tmp_path / "avg.ctsn"
        code = main(["ensemble", str(matrix_path), str(matrix_path), "--out", str(out_path)])
        assert code == 0
        merged = SimilarityMatrix.load(out_path)
        original = SimilarityMatrix.load(matrix_path)
        np.testing.assert_allclose(merged.scores, original.scores)

    def test_gen_is_reproducible_per_seed(self, tmp_path):
        args = [
            "gen", "--seed", "9", "--set", "train_clips=4", "--set", "val_clips=1",
            "--set", "test_clips=1", "--set", "candidate_count=5", "--set", "frames=2",
        ]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (
            tmp_path / "b/manifest.jsonl"
        ).read_bytes()
        feats = sorted(p.name for p in (tmp_path / "a/features").iterdir())
        for name in feats:
            assert (tmp_path / "a/features" / name).read_bytes() == (
                tmp_path / "b/features" / name
            ).read_bytes()

    def test_threads_produce_identical_detection(self, data_dir, trained_dir, tmp_path):
        single = tmp_path / "single.jsonl"
        multi = tmp_path / "multi.jsonl"
        base = [
            "detect", "--data", str(data_dir),
            "--checkpoint", str(trained_dir / "checkpoint.ctsn"), "--split", "test",
        ]
        assert main(base + ["--out", str(single)]) == 0
        assert main(base + ["--out", str(multi), "--threads", "3"]) == 0
        assert single.read_text() == multi.read_text()
