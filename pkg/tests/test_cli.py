import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from crydet.audio.cryf import read_bags, read_features
from crydet.audio.manifest import write_manifest
from crydet.cli import build_parser, main
from crydet.evaluation import ScoredSet, write_scores
from crydet.model import build_blazenet, build_head, save_weights
from crydet.synth import make_bag_files, make_clip_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest, bags = make_bag_files(root / "audio", n_abnormal=2, n_normal=2, seed=4, segments=5)
    save_weights(build_blazenet(0).weights(), root / "backbone.cryd")
    save_weights(build_head(224, seed=0).weights(), root / "head.cryd")
    return root, manifest, bags


def run(*argv):
    return main([str(a) for a in argv])


def featurize(ws, out, *extra):
    root, manifest, _ = ws
    return run("featurize", "--manifest", manifest, "--out", out, *extra)


class TestFeaturize:
    def test_raw_spectrogram_shape(self, workspace, tmp_path):
        assert featurize(workspace, tmp_path, "--raw-spectrogram") == 0
        records = read_bags(tmp_path / "train" / "bags.csv")
        assert len(records) == 4 and all(r.n_frames == 5 for r in records)
        assert read_features(tmp_path / "train" / records[0].source).shape == (5, 4096)

    def test_backbone_shape(self, workspace, tmp_path):
        root = workspace[0]
        assert featurize(workspace, tmp_path, "--backbone", root / "backbone.cryd") == 0
        rec = read_bags(tmp_path / "train" / "bags.csv")[0]
        assert read_features(tmp_path / "train" / rec.source).shape == (5, 224)

    def test_byte_identical_and_worker_independent(self, workspace, tmp_path):
        root = workspace[0]
        args = ("--backbone", root / "backbone.cryd")
        assert featurize(workspace, tmp_path / "a", *args) == 0
        assert featurize(workspace, tmp_path / "b", *args, "--workers", "3") == 0
        for f in sorted((tmp_path / "a" / "train").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "train" / f.name).read_bytes()

    def test_empty_manifest(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [])
        assert run("featurize", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "o", "--raw-spectrogram") == 2

    def test_needs_exactly_one_source(self, workspace, tmp_path):
        assert featurize(workspace, tmp_path) == 2

    def test_missing_audio_is_runtime_failure(self, workspace, tmp_path):
        (tmp_path / "m.csv").write_text(f"path,label,split\n{tmp_path / 'nope.wav'},cry,train\n")
        assert run("featurize", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "o", "--raw-spectrogram") == 1


class TestDetect:
    def test_five_rows(self, workspace, tmp_path):
        root, _, bags = workspace
        out = tmp_path / "d.csv"
        assert run("detect", "--backbone", root / "backbone.cryd", "--wav", bags[0].path, "--out", out) == 0
        rows = list(csv.DictReader(out.open()))
        assert [float(r["start_s"]) for r in rows] == [0.0, 1.0, 2.0, 3.0, 4.0]
        assert all(r["label"] in ("cry", "other") for r in rows)

    def test_with_head(self, workspace, tmp_path):
        root, _, bags = workspace
        out = tmp_path / "d.csv"
        assert run("detect", "--backbone", root / "backbone.cryd", "--head", root / "head.cryd",
                   "--wav", bags[0].path, "--out", out) == 0
        assert len(out.read_text().splitlines()) == 6

    def test_head_file_as_backbone(self, workspace, tmp_path):
        root, _, bags = workspace
        assert run("detect", "--backbone", root / "head.cryd", "--wav", bags[0].path, "--out", tmp_path / "x") == 1

    def test_missing_required(self, workspace):
        assert run("detect", "--wav", "x.wav") == 2


class TestEval:
    def test_perfect(self, tmp_path):
        write_scores(tmp_path / "s.csv", ScoredSet(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])))
        assert run("eval", "--scores", tmp_path / "s.csv", "--out", tmp_path / "r") == 0
        metrics = json.loads((tmp_path / "r" / "metrics.json").read_text())
        assert metrics["auc"] == 1.0 and metrics["f1_max"] == 1.0

    def test_one_class_is_runtime_failure(self, tmp_path):
        write_scores(tmp_path / "s.csv", ScoredSet(np.array([0.1, 0.2]), np.array([1, 1])))
        assert run("eval", "--scores", tmp_path / "s.csv", "--out", tmp_path / "r") == 1


class TestConfig:
    def test_k_exceeds_segments_in_config(self, tmp_path, caplog):
        cfg = tmp_path / "head.cfg"
        cfg.write_text("features = x\nout = y\ntop-k = 11\nsegments = 10\n")
        assert run("train-head", "--config", cfg) == 2
        assert "top-k 11 exceeds segment count 10" in caplog.text

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("scores = a\nout = b\nbogus = 1\n")
        assert run("eval", "--config", cfg) == 2

    def test_bad_value(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("scores = a\nout = b\nthreshold = high\n")
        assert run("eval", "--config", cfg) == 2

    def test_flags_override_file(self, tmp_path, monkeypatch):
        write_scores(tmp_path / "s.csv", ScoredSet(np.array([0.3, 0.6]), np.array([0, 1])))
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"# comment\nscores = {tmp_path / 's.csv'}\nout = {tmp_path / 'from_file'}\nthreshold = 0.1\n")
        monkeypatch.setenv("CRYDET_CONFIG", str(cfg))
        assert run("eval", "--out", tmp_path / "from_flag") == 0
        metrics = json.loads((tmp_path / "from_flag" / "metrics.json").read_text())
        assert metrics["threshold"] == 0.1 and not (tmp_path / "from_file").exists()

    def test_missing_config_file(self, tmp_path):
        assert run("eval", "--config", tmp_path / "absent.cfg") == 2


def test_help_lists_defaults(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    expected = {
        "train-backbone": ["0.001", "0.9", "60", "0.1", "20", "32"],
        "train-head": ["20000", "128", "10", "0.001", "2", "(chosen)"],
        "mine": ["--t", "2"],
        "detect": ["--hop", "1.0", "0.5"],
    }
    for name, p in sub.items():
        text = p.format_help()
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[-1] in text
        for token in expected.get(name, []):
            assert token in text, (name, token)


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "crydet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-head" in proc.stdout


def test_full_pipeline_is_deterministic(workspace, tmp_path):
    root, manifest, bags = workspace
    clips = make_clip_dataset(tmp_path / "clips", n_cry=10, n_other=10, seed=1)
    write_scores(tmp_path / "scores.csv", ScoredSet(np.array([0.2, 0.7, 0.4]), np.array([0, 1, 1])))

    def pipeline(tag):
        out = tmp_path / tag
        out.mkdir()
        assert run("featurize", "--manifest", manifest, "--out", out / "feat", "--backbone", root / "backbone.cryd") == 0
        assert run("train-backbone", "--manifest", clips, "--out", out / "bb.cryd", "--log", out / "bb.csv",
                   "--epochs", 1, "--batch", 4, "--seed", 3) == 0
        assert run("train-head", "--features", out / "feat" / "train", "--out", out / "head.cryd",
                   "--log", out / "head.csv", "--steps", 4, "--batch", 2, "--segments", 5, "--eval-every", 2,
                   "--seed", 3) == 0
        assert run("mine", "--features", out / "feat" / "train", "--head", out / "head.cryd",
                   "--out", out / "mined.csv") == 0
        assert run("detect", "--backbone", out / "bb.cryd", "--head", out / "head.cryd", "--wav", bags[0].path,
                   "--out", out / "detect.csv") == 0
        assert run("eval", "--scores", tmp_path / "scores.csv", "--out", out / "eval") == 0
        return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    first, second = pipeline("one"), pipeline("two")
    assert first.keys() == second.keys() and len(first) >= 12
    for name in first:
        assert first[name] == second[name], name
