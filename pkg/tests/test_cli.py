import subprocess
import sys

import pytest

from aptlm import cli
from aptlm import pipeline as P

from conftest import tiny_config


@pytest.fixture
def conf(tmp_path, tiny_root, tiny_lm):
    cfg = tiny_config(tmp_path / "run", data_dir=str(tiny_root))
    P.checkpoint_dir(cfg).mkdir(parents=True)
    P.checkpoint_path(cfg, "lm").write_bytes(tiny_lm.read_bytes())
    path = tmp_path / "tiny.conf"
    path.write_text(cfg.dumps())
    return cfg, str(path)


def test_help_runs_as_console_script():
    out = subprocess.run([sys.executable, "-m", "aptlm.cli", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("render", "train", "eval", "gradcheck", "ablate-aligner", "ablate-tokens", "report"):
        assert cmd in out.stdout


def test_gradcheck_ops(capsys):
    assert cli.main(["gradcheck", "--scope", "ops"]) == 0
    assert capsys.readouterr().out.strip().endswith("gradcheck: PASS")


@pytest.mark.parametrize("argv", [
    ["train"],
    ["train", "--smoke", "--set", "bogus=1"],
    ["eval", "--smoke", "--task", "AAC", "--metric", "map"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)]) == cli.EXIT_ERROR
    assert capsys.readouterr().err.startswith("error:")


def test_missing_dependency_exit_2(conf, capsys):
    _, path = conf
    assert cli.main(["train", path, "--stage", "2"]) == cli.EXIT_ERROR
    assert "stage1" in capsys.readouterr().err
    assert cli.main(["eval", path, "--task", "SEC", "--checkpoint", "/nonexistent.aptf"]) == cli.EXIT_ERROR


def test_train_eval_report(conf, capsys):
    cfg, path = conf
    assert cli.main(["train", path]) == 0
    assert (cfg.out / "loss_curves.png").exists()
    assert cli.main(["eval", path, "--task", "NLAR", "--limit", "5"]) == 0
    assert "majority=" in capsys.readouterr().out
    assert (cfg.out / "reports" / "NLAR_exact_match.jsonl").exists()
    assert cli.main(["eval", path, "--task", "AT"]) == 0
    assert "metric=map" in capsys.readouterr().out
    assert cli.main(["eval", path, "--task", "FSC", "--ways", "2", "--episodes", "4"]) == 0
    assert (cfg.out / "reports" / "FSC_2way_1shot_exact_match.jsonl").exists()
    assert cli.main(["report", path, "--ways", "2", "3", "--episodes", "3"]) == 0
    assert (cfg.out / "reports" / "fewshot_sweep.png").exists()
    assert (cfg.out / "reports" / "fewshot_sweep.csv").read_text().startswith("ways,shots")


def test_render(tmp_path):
    cfg = tiny_config(tmp_path / "r")
    (tmp_path / "c.conf").write_text(cfg.dumps())
    assert cli.main(["render", str(tmp_path / "c.conf")]) == 0
    assert (cfg.out / "data" / "manifests" / "test" / "NLAR.jsonl").exists()
    assert (cfg.out / "data" / "config.txt").exists()
