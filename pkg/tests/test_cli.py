import json
import subprocess
import sys
import time

import numpy as np
import pytest

from changecap.cli import build_parser, main
from changecap.scenegen import read_pnm


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen -> train (1 epoch) -> predict -> score, timed."""
    root = tmp_path_factory.mktemp("cli")
    start = time.perf_counter()
    assert run("gen", "--num-scenes", 20, "--seed", 3, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--model", "duda", "--epochs", 1,
               "--out", root / "run") == 0
    assert run("predict", "--data", root / "data", "--checkpoint", root / "run",
               "--out", root / "pred.jsonl") == 0
    assert run("score", "--data", root / "data", "--predictions", root / "pred.jsonl",
               "--out", root / "score") == 0
    return root, time.perf_counter() - start


class TestParser:
    def test_help_lists_every_flag(self):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices
        assert set(sub) == {"gen", "train", "predict", "score", "viz"}
        for name, p in sub.items():
            text = p.format_help()
            for action in p._actions:
                for flag in action.option_strings:
                    assert flag in text, (name, flag)
            assert all(f in text for f in ("--seed", "--force", "--out"))

    def test_help_exits_zero(self):
        out = subprocess.run([sys.executable, "-m", "changecap.cli", "--help"],
                             capture_output=True, text=True)
        assert out.returncode == 0
        assert all(c in out.stdout for c in ("gen", "train", "predict", "score", "viz"))

    def test_unknown_flag_fails(self):
        out = subprocess.run([sys.executable, "-m", "changecap.cli", "gen", "--out", "x",
                              "--bogus"], capture_output=True, text=True)
        assert out.returncode != 0
        assert "--bogus" in out.stderr

    def test_bad_model_choice(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("train", "--data", ".", "--model", "cnn", "--out", "x")
        assert exc.value.code != 0


class TestChain:
    def test_runs_under_five_minutes(self, chain):
        _, seconds = chain
        assert seconds < 300

    def test_artifacts(self, chain):
        root, _ = chain
        assert (root / "run" / "model.ckpt").exists()
        log = json.loads((root / "run" / "train_log.json").read_text())
        assert [e["epoch"] for e in log["epochs"]] == [1]
        preds = [json.loads(line) for line in (root / "pred.jsonl").read_text().splitlines()]
        manifest = [json.loads(line) for line in
                    (root / "data" / "manifest.jsonl").read_text().splitlines()]
        assert len(manifest) == 40
        assert [p["id"] for p in preds] == [m["id"] for m in manifest if m["split"] == "test"]
        report = json.loads((root / "score" / "report.json").read_text())
        assert report["total"]["n"] == len(preds)
        assert "Confusion" in (root / "score" / "report.txt").read_text()
        assert (root / "score" / "difficulty.csv").read_text().startswith("bucket")

    def test_refuses_to_overwrite(self, chain, capsys):
        root, _ = chain
        assert run("gen", "--num-scenes", 20, "--out", root / "data") == 1
        assert "--force" in capsys.readouterr().err
        assert run("predict", "--data", root / "data", "--checkpoint", root / "run",
                   "--out", root / "pred.jsonl") == 1

    def test_same_seed_same_bytes(self, chain, tmp_path):
        root, _ = chain
        assert run("gen", "--num-scenes", 20, "--seed", 3, "--out", tmp_path / "again") == 0
        assert (tmp_path / "again" / "manifest.jsonl").read_bytes() == \
            (root / "data" / "manifest.jsonl").read_bytes()
        assert run("gen", "--num-scenes", 20, "--seed", 3, "--force", "--out",
                   tmp_path / "again") == 0

    def test_missing_inputs_give_messages(self, tmp_path, capsys):
        assert run("score", "--data", tmp_path, "--predictions", tmp_path / "none.jsonl",
                   "--out", tmp_path / "s") == 1
        assert "error" in capsys.readouterr().err


class TestViz:
    def _viz(self, chain, pair_id, out):
        root, _ = chain
        return run("viz", "--predictions", root / "pred.jsonl", "--pair-id", pair_id, "--out", out)

    def _preds(self, chain):
        root, _ = chain
        return [json.loads(line) for line in (root / "pred.jsonl").read_text().splitlines()]

    def test_outputs(self, chain, tmp_path):
        rec = self._preds(chain)[0]
        assert self._viz(chain, rec["id"], tmp_path / "v") == 0
        for tag in ("before", "after"):
            img = read_pnm(tmp_path / "v" / f"att_{tag}.pgm")
            assert img.shape == (64, 64)
        rows = (tmp_path / "v" / "alpha.csv").read_text().splitlines()
        assert rows[0] == "before,diff,after"
        alpha = np.array([[float(v) for v in r.split(",")] for r in rows[1:]]).reshape(-1, 3)
        assert alpha.shape == (len(rec["tokens"]), 3)
        assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-5)
        assert (tmp_path / "v" / "caption.txt").read_text().strip() == rec["caption"]

    def test_distractor_still_emits_alpha(self, chain, tmp_path):
        root, _ = chain
        manifest = [json.loads(line) for line in
                    (root / "data" / "manifest.jsonl").read_text().splitlines()]
        pid = next(m["id"] for m in manifest
                   if m["split"] == "test" and m["change"]["change_type"] == "DISTRACTOR")
        assert self._viz(chain, pid, tmp_path / "d") == 0
        assert (tmp_path / "d" / "alpha.csv").read_text().startswith("before,diff,after")

    def test_unknown_pair(self, chain, tmp_path, capsys):
        assert self._viz(chain, "nope", tmp_path / "u") == 1
        assert "nope" in capsys.readouterr().err
