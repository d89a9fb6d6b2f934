import json

import numpy as np
import pytest

from lcarep.cli import main
from lcarep.tensor import load_tensor, save_tensor

TINY_SPEC = ["--pair_classes", "6", "--heldout_pair_classes", "2", "--unlabeled_classes", "4",
             "--unlabeled_per_class", "2", "--heldout_unlabeled_classes", "2", "--probe_classes", "3",
             "--probe_test_per_class", "2", "--side", "16"]
SMALL = ["--backbone.input_size", "16", "--backbone.block_channels", "[4, 8]", "--train.batch_size", "8"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(out / "data"), *TINY_SPEC]) == 0
    return out


class TestExitCodes:
    def test_unknown_config_key(self, capsys, data, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[train]\nepochz = 3\n")
        code, out, err = run(capsys, "train-teacher", "--pairs", str(data / "data/pairs.jsonl"),
                             "--config", str(cfg), "--out", str(tmp_path / "t.ckpt"))
        assert code == 1 and "train.epochz" in err and out == ""

    def test_unknown_override(self, capsys, data, tmp_path):
        code, _, err = run(capsys, "train-teacher", "--pairs", str(data / "data/pairs.jsonl"),
                           "--out", str(tmp_path / "t.ckpt"), "--loss.marjin", "2")
        assert code == 1 and "loss.marjin" in err

    def test_missing_subcommand(self, capsys):
        assert run(capsys)[0] == 1

    def test_corrupt_checkpoint(self, capsys, data, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"CKPT\x01\x00\x00\x00garbage")
        code, out, err = run(capsys, "pseudolabel", "--ckpt", str(bad), "--images",
                             str(data / "data/unlabeled.jsonl"), "--out", str(tmp_path / "s"))
        assert code == 2 and "offset" in err and out == ""

    def test_missing_manifest(self, capsys, tmp_path):
        code, _, _ = run(capsys, "embed", "--ckpt", "raw", "--images", str(tmp_path / "nope.jsonl"),
                         "--out", str(tmp_path / "e.tnsr"))
        assert code == 2

    def test_bad_threads(self, capsys):
        assert run(capsys, "--threads", "0", "lca-bench")[0] == 1


class TestWorkflow:
    def test_end_to_end(self, capsys, data, tmp_path):
        d = data / "data"
        t = tmp_path / "teacher" / "t.ckpt"
        code, out, _ = run(capsys, "train-teacher", "--pairs", str(d / "pairs.jsonl"), "--out", str(t),
                           "--train.epochs", "2", *SMALL)
        assert code == 0 and json.loads(out)["epochs"] == 2
        resolved = (t.parent / "config.resolved").read_text()
        assert "train.epochs = 2\n" in resolved and "backbone.block_channels = [4, 8]\n" in resolved
        assert len((t.parent / "metrics.jsonl").read_text().splitlines()) == 2

        code, out, _ = run(capsys, "pseudolabel", "--ckpt", str(t), "--images", str(d / "unlabeled.jsonl"),
                           "--out", str(tmp_path / "store"))
        assert code == 0 and json.loads(out) == {"store": str(tmp_path / "store"), "count": 8, "dim": 8}

        s = tmp_path / "student" / "s.ckpt"
        code, out, _ = run(capsys, "train-student", "--pairs", str(d / "pairs.jsonl"), "--pseudo",
                           str(tmp_path / "store"), "--images", str(d / "unlabeled.jsonl"), "--out", str(s),
                           "--train.epochs", "1", *SMALL)
        assert code == 0 and s.exists()

        for name in ("probe_train", "probe_test"):
            code, out, _ = run(capsys, "embed", "--ckpt", str(s), "--images", str(d / f"{name}.jsonl"),
                               "--out", str(tmp_path / f"{name}.tnsr"), "--labels-out", str(tmp_path / f"{name}.txt"))
            assert code == 0 and json.loads(out)["dim"] == 8
        code, out, _ = run(capsys, "fit-lr", "--embeddings", str(tmp_path / "probe_train.tnsr"), "--labels",
                           str(tmp_path / "probe_train.txt"), "--out", str(tmp_path / "lr.ckpt"))
        assert code == 0
        code, out, _ = run(capsys, "eval", "--model", str(tmp_path / "lr.ckpt"), "--embeddings",
                           str(tmp_path / "probe_test.tnsr"), "--labels", str(tmp_path / "probe_test.txt"))
        result = json.loads(out)
        assert code == 0 and result["n"] == 6 and result["k"] == 3 and 0 <= result["accuracy"] <= 1

    def test_eval_separable(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1, 2], 20)
        centres = np.eye(3) * 10
        emb = (centres[labels] + rng.standard_normal((60, 3))).astype(np.float32)
        save_tensor(tmp_path / "e.tnsr", emb)
        (tmp_path / "l.txt").write_text("".join(f"{v}\n" for v in labels))
        assert run(capsys, "fit-lr", "--embeddings", str(tmp_path / "e.tnsr"), "--labels", str(tmp_path / "l.txt"),
                   "--out", str(tmp_path / "m.ckpt"))[0] == 0
        code, out, _ = run(capsys, "eval", "--model", str(tmp_path / "m.ckpt"), "--embeddings",
                           str(tmp_path / "e.tnsr"), "--labels", str(tmp_path / "l.txt"))
        assert code == 0 and json.loads(out) == {"accuracy": 1.0, "n": 60, "k": 3}

    def test_raw_embed(self, capsys, data, tmp_path):
        code, out, _ = run(capsys, "embed", "--ckpt", "raw", "--images", str(data / "data/probe_test.jsonl"),
                           "--out", str(tmp_path / "r.tnsr"))
        assert code == 0 and load_tensor(tmp_path / "r.tnsr").shape == (6, 16 * 16 * 3)


class TestLcaBench:
    def test_output(self, capsys):
        code, out, _ = run(capsys, "lca-bench", "--h", "6", "--w", "5", "--c", "8", "--iters", "2")
        result = json.loads(out)
        assert code == 0 and out.count("\n") == 1
        assert {"fast_ns_per_call", "naive_ns_per_call", "speedup"} <= set(result)
        assert result["speedup"] == pytest.approx(result["naive_ns_per_call"] / result["fast_ns_per_call"])

    def test_rejects_zero(self, capsys):
        assert run(capsys, "lca-bench", "--iters", "0")[0] == 1
