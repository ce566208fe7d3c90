import hashlib
import json
import subprocess
import sys

import pytest
import torch

from kcnet import cli
from kcnet.dataio import read_manifest

TINY_INI = """
[model]
resolution = 32
width = 8

[stage1]
batch_size = 8

[stage2]
batch_size = 8
"""


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root, pattern="*"):
    return {p.relative_to(root).as_posix(): digest(p) for p in sorted(root.rglob(pattern)) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY_INI)
    for profile, n, k, seed in (("bench", 10, 6, 1), ("handheld", 8, 8, 2)):
        code = cli.main(["generate", "--profile", profile, "--normal", str(n), "--kc", str(k),
                         "--out", str(root / profile), "--seed", str(seed), "--resolution", "96", "--workers", "1"])
        assert code == 0
    return root


def run(ws, *argv):
    return cli.main([*argv, "--config", str(ws / "tiny.ini"), "--scale", "ci"])


class TestUsage:
    def test_missing_out(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["generate", "--profile", "bench", "--normal", "1", "--kc", "1"])
        assert e.value.code == 2

    def test_stage2_needs_checkpoint(self, workspace):
        with pytest.raises(SystemExit) as e:
            run(workspace, "train", "--stage", "2", "--manifest", str(workspace / "handheld/manifest.tsv"),
                "--out", str(workspace / "x"))
        assert e.value.code == 2

    def test_bad_fracs(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["ablate", "--bench", "b", "--handheld", "h", "--sweep", "stage2-fraction",
                      "--fracs", "0.1,1.5", "--out", "o"])
        assert e.value.code == 2

    def test_missing_manifest_exit_1(self, tmp_path, capsys):
        code = cli.main(["stats", "--manifest", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)])
        assert code == 1
        assert "nope.tsv" in capsys.readouterr().err


class TestGenerate:
    def test_rows_and_echo(self, workspace):
        assert len(read_manifest(workspace / "bench/manifest.tsv")) == 16
        echo = json.loads((workspace / "bench/resolved_config.json").read_text())
        assert echo["seed"] == 1 and echo["resolution"] == 96

    def test_fifteen_rows_and_identical_rerun(self, tmp_path):
        args = ["generate", "--profile", "bench", "--normal", "10", "--kc", "5", "--seed", "1", "--resolution", "64"]
        assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
        assert cli.main([*args, "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
        assert len(read_manifest(tmp_path / "a/manifest.tsv")) == 15
        assert tree_digest(tmp_path / "a", "*.png") == tree_digest(tmp_path / "b", "*.png")
        assert digest(tmp_path / "a/manifest.tsv") == digest(tmp_path / "b/manifest.tsv")

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        assert cli.main(["generate", "--profile", "handheld", "--normal", "1", "--kc", "1", "--out", "rel",
                         "--resolution", "48", "--workers", "1"]) == 0
        assert (tmp_path / "rel/manifest.tsv").exists()


def test_stats(workspace, capsys):
    assert run(workspace, "stats", "--manifest", str(workspace / "bench/manifest.tsv"),
               "--out", str(workspace / "stats")) == 0
    stats = json.loads((workspace / "stats/stats.json").read_text())
    assert set(stats) == {"axial", "tangential"}


@pytest.fixture(scope="module")
def chain(workspace):
    s1, s2 = workspace / "s1", workspace / "s2"
    assert run(workspace, "train", "--stage", "1", "--manifest", str(workspace / "bench/manifest.tsv"),
               "--epochs", "1", "--out", str(s1)) == 0
    assert run(workspace, "train", "--stage", "2", "--manifest", str(workspace / "handheld/manifest.tsv"),
               "--from-checkpoint", str(s1 / "stage1.pt"), "--epochs", "2", "--out", str(s2)) == 0
    return s1, s2


class TestTrainChain:
    def test_stage1_artifacts(self, chain):
        s1, _ = chain
        assert (s1 / "stage1.pt").exists()
        assert len((s1 / "stage1_log.jsonl").read_text().splitlines()) == 1
        echo = json.loads((s1 / "resolved_config.json").read_text())
        assert echo["train_config"]["epochs"] == 1 and echo["train_config"]["momentum"] == 0.9
        assert echo["profile"]["name"] == "ci"

    def test_stage2_records_split(self, chain):
        _, s2 = chain
        meta = torch.load(s2 / "stage2.pt", weights_only=True)["meta"]
        splits = json.loads((s2 / "stage2_splits.json").read_text())
        assert meta["test_ids"] == splits["test"] and len(splits["test"]) == 8
        assert not set(splits["train"]) & set(splits["test"])
        assert len((s2 / "stage2_log.jsonl").read_text().splitlines()) == 2

    def test_inputs_untouched(self, workspace, chain):
        before = digest(chain[0] / "stage1.pt")
        run(workspace, "eval", "--checkpoint", str(chain[0] / "stage1.pt"),
            "--manifest", str(workspace / "bench/manifest.tsv"), "--out", str(workspace / "e1"))
        assert digest(chain[0] / "stage1.pt") == before

    def test_eval_on_test_split(self, workspace, chain, capsys):
        out = workspace / "eval"
        assert run(workspace, "eval", "--checkpoint", str(chain[1] / "stage2.pt"),
                   "--manifest", str(workspace / "handheld/manifest.tsv"), "--out", str(out)) == 0
        lines = (out / "results.tsv").read_text().splitlines()
        assert [ln.split("\t")[0] for ln in lines[1:]] == ["final", "head_axial", "head_tangential"]
        preds = (out / "predictions.tsv").read_text().splitlines()
        assert len(preds) == 9
        assert "Se=" in capsys.readouterr().out

    def test_predict_prints_heads(self, workspace, chain, capsys):
        sid = read_manifest(workspace / "handheld/manifest.tsv")[0].id
        assert run(workspace, "predict", "--checkpoint", str(chain[1] / "stage2.pt"), "--manifest",
                   str(workspace / "handheld/manifest.tsv"), "--id", sid, "--out", str(workspace / "pred")) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "id\tpred_axial\tpred_tangential\tpred_final"
        row = lines[1].split("\t")
        assert row[0] == sid
        assert row[3] == ("keratoconus" if "keratoconus" in row[1:3] else "normal")

    def test_export_features(self, workspace, chain):
        out = workspace / "feat"
        assert run(workspace, "export-features", "--checkpoint", str(chain[1] / "stage2.pt"), "--manifest",
                   str(workspace / "handheld/manifest.tsv"), "--head", "axial", "--out", str(out)) == 0
        lines = (out / "features_axial.tsv").read_text().splitlines()
        assert len(lines) == 9 and len(lines[0].split("\t")) == 130

    def test_missing_checkpoint(self, workspace, capsys):
        code = run(workspace, "eval", "--checkpoint", str(workspace / "gone.pt"),
                   "--manifest", str(workspace / "handheld/manifest.tsv"), "--out", str(workspace / "e"))
        assert code == 1 and "gone.pt" in capsys.readouterr().err


class PerfectStub(torch.nn.Module):
    """Replays the true labels in manifest order."""

    def __init__(self, labels):
        super().__init__()
        self.labels = labels
        self.config = type("C", (), {"resolution": 32})()

    def forward(self, axial, tangential):
        y = torch.tensor(self.labels[: len(axial)])
        self.labels = self.labels[len(axial):]
        p = torch.nn.functional.one_hot(y, 2).float()
        return p, p


def test_eval_perfect_stub(workspace, monkeypatch, capsys):
    samples = read_manifest(workspace / "handheld/manifest.tsv")
    samples = [s for s in samples if s.label == "normal"][:2] + [s for s in samples if s.label != "normal"][:2]
    labels = [s.y for s in samples]
    from kcnet.dataio import ChannelStats, write_manifest
    write_manifest(samples, workspace / "handheld/toy4.tsv")
    stats = {m: ChannelStats.identity().to_dict() for m in ("axial", "tangential")}
    monkeypatch.setattr(cli, "load_checkpoint", lambda p: (PerfectStub(list(labels)), {"stats": stats}))
    out = workspace / "stub"
    assert run(workspace, "eval", "--checkpoint", "stub.pt", "--manifest", str(workspace / "handheld/toy4.tsv"),
               "--out", str(out)) == 0
    assert "Se=1.0000 Sp=1.0000 Acc=1.0000" in capsys.readouterr().out


class TestBaseline:
    def test_ppk(self, workspace):
        out = workspace / "ppk"
        assert run(workspace, "baseline", "--method", "ppk", "--test-manifest",
                   str(workspace / "handheld/manifest.tsv"), "--out", str(out)) == 0
        assert (out / "results.tsv").read_text().splitlines()[1].startswith("baseline-ppk\t")

    def test_svm(self, workspace):
        out = workspace / "svm"
        assert run(workspace, "baseline", "--method", "svm", "--train-manifest", str(workspace / "bench/manifest.tsv"),
                   "--test-manifest", str(workspace / "handheld/manifest.tsv"), "--out", str(out)) == 0

    def test_svm_needs_train(self, workspace):
        with pytest.raises(SystemExit) as e:
            run(workspace, "baseline", "--method", "svm", "--test-manifest",
                str(workspace / "handheld/manifest.tsv"), "--out", str(workspace / "svm2"))
        assert e.value.code == 2


class TestAblate:
    def test_table2_six_rows(self, workspace):
        out = workspace / "grid"
        assert run(workspace, "ablate", "--bench", str(workspace / "bench/manifest.tsv"), "--handheld",
                   str(workspace / "handheld/manifest.tsv"), "--grid", "table2", "--seeds", "1",
                   "--epochs1", "1", "--epochs2", "1", "--out", str(out)) == 0
        rows = (out / "results.tsv").read_text().splitlines()[1:]
        assert len(rows) == 6
        assert [r.split("\t")[0] for r in rows][:2] == ["stage1/none", "stage1/mixup"]
        assert len((out / "results_runs.tsv").read_text().splitlines()) == 7

    def test_sweep_five_rows(self, workspace):
        out = workspace / "sweep"
        assert run(workspace, "ablate", "--bench", str(workspace / "bench/manifest.tsv"), "--handheld",
                   str(workspace / "handheld/manifest.tsv"), "--sweep", "stage2-fraction",
                   "--fracs", "0.1,0.2,0.3,0.4,0.5", "--seeds", "1", "--epochs1", "1", "--epochs2", "1",
                   "--out", str(out)) == 0
        rows = (out / "results.tsv").read_text().splitlines()[1:]
        assert [r.split("\t")[0] for r in rows] == [f"frac={f}" for f in (0.1, 0.2, 0.3, 0.4, 0.5)]


def test_rerun_in_fresh_process_is_byte_identical(workspace, tmp_path):
    """Checkpoints, logs and result tables match across separate interpreter runs."""
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        subprocess.run([sys.executable, "-m", "kcnet.cli", "train", "--stage", "1", "--manifest",
                        str(workspace / "bench/manifest.tsv"), "--epochs", "1", "--out", str(out),
                        "--config", str(workspace / "tiny.ini"), "--scale", "ci", "--deterministic"], check=True)
        outs.append(out)
    a, b = (tree_digest(o) for o in outs)
    a.pop("resolved_config.json"), b.pop("resolved_config.json")  # records its own --out
    assert a == b
