"""CLI tests: the full subcommand chain on a tiny dataset, exit codes,
config parsing, and manifest-based reproducibility."""

import hashlib
import json
from pathlib import Path

import pytest

from semidet.cli import main, parse_config_file
from semidet.errors import ConfigError


def run(*argv):
    return main([str(a) for a in argv])


def dir_hash(root: Path, pattern: str) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob(pattern)):
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    assert run("gen-data", "--out", root / "ds", "--n", 24, "--seed", 7) == 0
    assert (
        run(
            "split",
            "--data",
            root / "ds" / "annotations.json",
            "--fraction",
            0.25,
            "--fold",
            1,
            "--out",
            root / "sp",
        )
        == 0
    )
    assert (
        run(
            "train-teacher",
            "--labeled",
            root / "sp" / "labeled.json",
            "--out",
            root / "t",
            "--steps",
            25,
            "--seed",
            3,
        )
        == 0
    )
    return root


class TestGenData:
    def test_rerun_identical_hash(self, tmp_path):
        for sub in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / sub, "--n", 10, "--seed", 9) == 0
        assert dir_hash(tmp_path / "a", "*.ppm") == dir_hash(tmp_path / "b", "*.ppm")
        da = json.loads((tmp_path / "a" / "annotations.json").read_text())
        db = json.loads((tmp_path / "b" / "annotations.json").read_text())
        assert da == db

    def test_refuses_reuse_without_overwrite(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "x", "--n", 4, "--seed", 1) == 0
        assert run("gen-data", "--out", tmp_path / "x", "--n", 4, "--seed", 1) == 2
        assert (
            run("gen-data", "--out", tmp_path / "x", "--n", 4, "--seed", 1, "--overwrite")
            == 0
        )


class TestSplit:
    def test_arithmetic(self, workspace):
        labeled = json.loads((workspace / "sp" / "labeled.json").read_text())
        assert len(labeled["images"]) == 6  # 25% of 24

    def test_fraction_500_to_25(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d", "--n", 40, "--seed", 2) == 0
        assert (
            run(
                "split",
                "--data",
                tmp_path / "d" / "annotations.json",
                "--fraction",
                0.05,
                "--fold",
                1,
                "--out",
                tmp_path / "s",
            )
            == 0
        )
        labeled = json.loads((tmp_path / "s" / "labeled.json").read_text())
        assert len(labeled["images"]) == 2


class TestTrainAndEval:
    def test_full_chain(self, workspace, tmp_path):
        assert (
            run(
                "pseudo-label",
                "--teacher",
                workspace / "t" / "teacher.ckpt",
                "--unlabeled",
                workspace / "sp" / "unlabeled.json",
                "--out",
                tmp_path / "pl.json",
                "--tau",
                0.3,
            )
            == 0
        )
        doc = json.loads((tmp_path / "pl.json").read_text())
        assert doc["tau"] == 0.3
        assert "teacher_tag" in doc
        assert (
            run(
                "train-student",
                "--labeled",
                workspace / "sp" / "labeled.json",
                "--unlabeled",
                workspace / "sp" / "unlabeled.json",
                "--teacher",
                workspace / "t" / "teacher.ckpt",
                "--pseudo",
                tmp_path / "pl.json",
                "--out",
                tmp_path / "student",
                "--steps",
                10,
                "--seed",
                3,
                "--aug-mode",
                "C+{G,B}+Cutout",
            )
            == 0
        )
        assert (tmp_path / "student" / "student.ckpt").exists()
        assert (tmp_path / "student" / "loss_log.csv").exists()
        assert (
            run(
                "eval",
                "--model",
                tmp_path / "student" / "student.ckpt",
                "--data",
                workspace / "sp" / "unlabeled.json",
                "--out",
                tmp_path / "eval",
            )
            == 0
        )
        doc = json.loads((tmp_path / "eval" / "eval.json").read_text())
        assert set(doc) == {"map", "ap50", "per_class"}

    def test_manifest_reproducibility(self, workspace, tmp_path):
        args = [
            "eval",
            "--model",
            workspace / "t" / "teacher.ckpt",
            "--data",
            workspace / "sp" / "labeled.json",
        ]
        assert run(*args, "--out", tmp_path / "e1") == 0
        manifest = json.loads((tmp_path / "e1" / "manifest.json").read_text())
        assert manifest["command"] == "eval"
        # re-execute from the recorded argv, swapping the output directory
        argv = [a if a != str(tmp_path / "e1") else str(tmp_path / "e2") for a in manifest["argv"]]
        assert main(argv) == 0
        assert (tmp_path / "e1" / "eval.json").read_text() == (
            tmp_path / "e2" / "eval.json"
        ).read_text()

    def test_jobs_flag_matches_serial(self, workspace, tmp_path):
        base = [
            "eval",
            "--model",
            workspace / "t" / "teacher.ckpt",
            "--data",
            workspace / "sp" / "unlabeled.json",
        ]
        assert run(*base, "--out", tmp_path / "serial") == 0
        assert run(*base, "--out", tmp_path / "par", "--jobs", 2) == 0
        assert (tmp_path / "serial" / "eval.json").read_text() == (
            tmp_path / "par" / "eval.json"
        ).read_text()


class TestSslDemo:
    def test_demo_writes_json(self, tmp_path):
        assert (
            run("ssl-demo", "--method", "UDA", "--steps", 40, "--out", tmp_path / "d") == 0
        )
        doc = json.loads((tmp_path / "d" / "demo.json").read_text())
        assert doc["method"] == "UDA"

    def test_unknown_method_is_config_error(self, tmp_path):
        assert (
            run("ssl-demo", "--method", "Nonsense", "--steps", 5, "--out", tmp_path / "d")
            == 2
        )


class TestAblateCli:
    def test_tiny_grid(self, workspace, tmp_path):
        assert (
            run(
                "ablate",
                "--kind",
                "grid",
                "--labeled",
                workspace / "sp" / "labeled.json",
                "--unlabeled",
                workspace / "sp" / "unlabeled.json",
                "--teacher",
                workspace / "t" / "teacher.ckpt",
                "--eval-data",
                workspace / "sp" / "labeled.json",
                "--tau-grid",
                "0.3,0.9",
                "--lambda-u-grid",
                "1",
                "--steps",
                4,
                "--seed",
                3,
                "--out",
                tmp_path / "ab",
            )
            == 0
        )
        rows = (tmp_path / "ab" / "ablation.csv").read_text().strip().splitlines()
        assert rows[0] == "lambda_u,tau,map,ap50"
        assert len(rows) == 3


class TestConfigFile:
    def test_parse_and_reject(self, tmp_path):
        good = tmp_path / "good.cfg"
        good.write_text("steps=12\nlr=0.2  # comment\naug_mode=C\nanchor_sizes=12,24\n")
        values = parse_config_file(good)
        assert values == {"steps": 12, "lr": 0.2, "aug_mode": "C", "anchor_sizes": (12, 24)}
        bad = tmp_path / "bad.cfg"
        bad.write_text("not a config line\n")
        with pytest.raises(ConfigError):
            parse_config_file(bad)
        unknown = tmp_path / "unknown.cfg"
        unknown.write_text("warmup=5\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_file(unknown)

    def test_flag_overrides_config(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps=5\nseed=3\n")
        assert (
            run(
                "train-teacher",
                "--labeled",
                workspace / "sp" / "labeled.json",
                "--out",
                tmp_path / "t2",
                "--config",
                cfg,
                "--steps",
                7,
            )
            == 0
        )
        saved = json.loads((tmp_path / "t2" / "config.json").read_text())
        assert saved["steps"] == 7
        assert saved["seed"] == 3


class TestExitCodes:
    def test_missing_data_is_3(self, tmp_path):
        assert (
            run(
                "split",
                "--data",
                tmp_path / "nope.json",
                "--fraction",
                0.5,
                "--out",
                tmp_path / "s",
            )
            == 3
        )

    def test_bad_fraction_is_2(self, workspace, tmp_path):
        assert (
            run(
                "split",
                "--data",
                workspace / "ds" / "annotations.json",
                "--fraction",
                1.7,
                "--out",
                tmp_path / "s",
            )
            == 2
        )
