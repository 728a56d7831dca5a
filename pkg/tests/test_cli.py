import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from causvid.cli import main, read_config_file, sha256_file

TINY = ["--frames", "8", "--height", "8", "--width", "8"]


def run_cli(args, home):
    import os
    old = os.environ.get("CAUSVID_HOME")
    os.environ["CAUSVID_HOME"] = str(home)
    try:
        return main(args)
    finally:
        if old is None:
            os.environ.pop("CAUSVID_HOME", None)
        else:
            os.environ["CAUSVID_HOME"] = old


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny trained pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(["gen-data", "--videos", "256", *TINY, "--seed", "0",
                    "--out", str(root / "d.cvds")], root) == 0
    assert run_cli(["train-teacher", "--data", str(root / "d.cvds"), "--iterations", "30",
                    "--seed", "0", "--out", str(root / "t.cvwt")], root) == 0
    assert run_cli(["gen-ode-pairs", "--teacher", str(root / "t.cvwt"), "--pairs", "8",
                    "--frames", "8", "--chunk-frames", "2", "--solver-steps", "8",
                    "--seed", "0", "--out", str(root / "p.cvop")], root) == 0
    assert run_cli(["init-student", "--teacher", str(root / "t.cvwt"), "--pairs",
                    str(root / "p.cvop"), "--chunk-frames", "2", "--iterations", "10",
                    "--seed", "0", "--out", str(root / "s0.cvwt")], root) == 0
    assert run_cli(["distill", "--teacher", str(root / "t.cvwt"), "--student",
                    str(root / "s0.cvwt"), "--data", str(root / "d.cvds"),
                    "--chunk-frames", "2", "--iterations", "4", "--seed", "0",
                    "--out", str(root / "s.cvwt")], root) == 0
    return root


class TestDeterminism:
    def test_gen_data_rerun_identical(self, tmp_path):
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            assert run_cli(["gen-data", "--videos", "16", *TINY, "--seed", "5",
                            "--out", str(tmp_path / sub / "d.cvds")], tmp_path / sub) == 0
        assert sha256_file(tmp_path / "a/d.cvds") == sha256_file(tmp_path / "b/d.cvds")

    def test_train_rerun_identical(self, workdir, tmp_path):
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            assert run_cli(["train-teacher", "--data", str(workdir / "d.cvds"),
                            "--iterations", "10", "--seed", "3",
                            "--out", str(tmp_path / sub / "t.cvwt")], tmp_path / sub) == 0
        assert sha256_file(tmp_path / "a/t.cvwt") == sha256_file(tmp_path / "b/t.cvwt")

    def test_generate_rerun_identical(self, workdir, tmp_path):
        outs = []
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            out = tmp_path / sub / "g.cvds"
            assert run_cli(["generate", "--weights", str(workdir / "s.cvwt"), "--cond", "1",
                            "--chunks", "3", "--chunk-frames", "2", "--seed", "9",
                            "--out", str(out)], tmp_path / sub) == 0
            outs.append(sha256_file(out))
        assert outs[0] == outs[1]


class TestManifests:
    def test_manifest_records_io_hashes(self, workdir):
        manifest = json.loads((workdir / "s.manifest.json").read_text())
        assert manifest["command"] == "distill"
        assert str(workdir / "d.cvds") in manifest["inputs"]
        assert manifest["inputs"][str(workdir / "d.cvds")] == sha256_file(workdir / "d.cvds")
        assert str(workdir / "s.cvwt") in manifest["outputs"]
        assert manifest["params"]["seed"] == 0
        assert manifest["params"]["iterations"] == 4

    def test_manifest_reproducible(self, tmp_path):
        # Same relative layout in two working directories: identical manifests.
        for sub in ("a", "b"):
            d = tmp_path / sub
            d.mkdir()
            proc = subprocess.run(
                [sys.executable, "-m", "causvid.cli", "gen-data", "--videos", "16", *TINY,
                 "--seed", "1", "--out", "d2.cvds"],
                cwd=d, capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
        assert sha256_file(tmp_path / "a/d2.manifest.json") == \
            sha256_file(tmp_path / "b/d2.manifest.json")


class TestConfigFile:
    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("videos = 16\nframes = 8\nheight = 8\nwidth = 8\nseed = 4\n")
        out1 = tmp_path / "a.cvds"
        assert run_cli(["gen-data", "--config", str(cfg), "--out", str(out1)], tmp_path) == 0
        out2 = tmp_path / "b.cvds"
        assert run_cli(["gen-data", "--config", str(cfg), "--seed", "4",
                        "--out", str(out2)], tmp_path) == 0
        assert sha256_file(out1) == sha256_file(out2)
        out3 = tmp_path / "c.cvds"
        assert run_cli(["gen-data", "--config", str(cfg), "--seed", "5",
                        "--out", str(out3)], tmp_path) == 0
        assert sha256_file(out1) != sha256_file(out3)

    def test_config_parser(self, tmp_path):
        cfg = tmp_path / "x.cfg"
        cfg.write_text("# comment\nkey-one = 3\n\nkey_two=hello # trailing\n")
        assert read_config_file(cfg) == {"key_one": "3", "key_two": "hello"}

    def test_bad_config_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not a kv line\n")
        with pytest.raises(SystemExit):
            read_config_file(cfg)


class TestUsageErrors:
    def test_unknown_flag_nonzero_exit(self):
        proc = subprocess.run([sys.executable, "-m", "causvid.cli", "gen-data",
                               "--no-such-flag"], capture_output=True, text=True)
        assert proc.returncode != 0
        assert "usage" in (proc.stderr + proc.stdout).lower()

    def test_unknown_subcommand(self):
        proc = subprocess.run([sys.executable, "-m", "causvid.cli", "frobnicate"],
                              capture_output=True, text=True)
        assert proc.returncode != 0

    def test_missing_required(self, tmp_path):
        with pytest.raises(SystemExit):
            run_cli(["train-teacher"], tmp_path)

    def test_all_subcommands_registered(self):
        from causvid.cli import build_commands
        assert set(build_commands()) == {
            "gen-data", "train-teacher", "finetune-causal", "gen-ode-pairs", "init-student",
            "distill", "generate", "serve", "eval", "bench", "ablate"}

    def test_paper_defaults(self):
        from causvid.cli import build_commands
        commands = build_commands()
        def default_of(cmd, flag):
            return {f.lstrip("-").replace("-", "_"): d for f, d, _ in commands[cmd].args}[flag]
        assert default_of("distill", "iterations") == 6000
        assert default_of("distill", "guidance") == 3.5
        assert default_of("distill", "ttur") == 5
        assert default_of("gen-ode-pairs", "pairs") == 1000
        assert default_of("init-student", "iterations") == 3000


class TestEvalAndStrip:
    def test_eval_student_writes_report_and_figures(self, workdir, tmp_path):
        out = tmp_path / "report.txt"
        assert run_cli(["eval", "--weights", str(workdir / "s.cvwt"), "--data",
                        str(workdir / "d.cvds"), "--chunk-frames", "2", "--samples", "16",
                        "--length-factor", "2", "--seed", "0", "--out", str(out)],
                       tmp_path) == 0
        assert out.exists()
        assert out.with_suffix(".mmd.png").exists()
        assert out.with_suffix(".degradation.png").exists()
        assert out.with_suffix(".degradation.csv").read_text().startswith("chunk,value")
        from causvid.metrics import MetricReport
        report = MetricReport.from_text(out.read_text())
        assert set(report.mmd_per_condition) == {0, 1, 2, 3}

    def test_generate_strip_png(self, workdir, tmp_path):
        out = tmp_path / "g.cvds"
        png = tmp_path / "strip.png"
        assert run_cli(["generate", "--weights", str(workdir / "s.cvwt"), "--cond", "0",
                        "--chunks", "2", "--chunk-frames", "2", "--seed", "0",
                        "--out", str(out), "--strip-png", str(png)], tmp_path) == 0
        assert png.exists() and png.stat().st_size > 0
