import json
import subprocess
import sys

import pytest

from stcnn import cli, dataio


def test_bound(capsys):
    assert cli.main(["bound", "--I", "10", "--r", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pattern_count_bound"] == 30 and out["affine_cell_bound"] == 211
    assert cli.main(["bound", "--I", "10000", "--r", "200"]) == 0
    assert json.loads(capsys.readouterr().out)["closed_form"] is None


def test_patterns_json(tmp_path, capsys):
    out = tmp_path / "p.json"
    assert cli.main(["patterns", "--toy", "fig1", "--draws", "500", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["rows"] == 5 and d["samples_drawn"] == 500
    raw = dataio.synthetic_digits(1, 28, seed=0)
    idx = tmp_path / "d.idx"
    dataio.write_idx_images(idx, raw)
    assert cli.main(["patterns", "--image", str(idx), "--crop", "4", "--draws", "200"]) == 0
    assert json.loads(capsys.readouterr().out.split("\n", 1)[1])["rows"] == 16


def test_toy_writes_outputs(tmp_path, capsys):
    rc = cli.main(["toy", "--toy", "fig1", "--trials", "2", "--steps", "40", "--output-dir", str(tmp_path)])
    assert rc == 0
    assert "fig1: primal=" in capsys.readouterr().out
    for f in ("summary.json", "report.md", "primal_trial1.csv", "timing.json"):
        assert (tmp_path / f).exists()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("toy = fig6\ntrials = 3\noptimizer.steps = 20\n")
    args = cli.build_parser().parse_args(["toy", "--config", str(cfg), "--trials", "1", "--sigmas", "0.25", "0.5"])
    conf = cli.config_from_args(args)
    assert conf.toy == "fig6" and conf.trials == 1 and conf.optimizer.steps == 20 and conf.sigmas == [0.25, 0.5]
    assert conf.experiment == "toy_fit"


def test_subcommand_experiment_names():
    for sub, exp in cli.SUBCOMMANDS.items():
        args = cli.build_parser().parse_args([sub])
        assert cli.config_from_args(args).experiment == exp


def test_errors_exit_code(tmp_path, capsys):
    assert cli.main(["toy", "--toy", "fig9"]) == 2
    assert "error:" in capsys.readouterr().err
    assert cli.main(["gap-verify", "--images", str(tmp_path / "missing.idx")]) == 2
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x01" + bytes(8))
    assert cli.main(["patterns", "--image", str(bad)]) == 2
    with pytest.raises(SystemExit):
        cli.main(["nope"])


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "stcnn", "bound", "--I", "5", "--r", "1"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["pattern_count_bound"] == 3
