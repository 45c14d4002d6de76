"""CLI exit codes, artifacts, and output contracts.

All commands run in-process through ``main(argv)`` so exit codes and stdout
can be asserted directly. Training commands use micro configs.
"""

import json

import numpy as np
import pytest

import metacross.cli as cli
from metacross.cli import GRADCHECK_THRESHOLD, main


MICRO_SEG = """
extent = 8
n_train = 2
n_eval = 2
steps = 4
embed_dim = 8
patch_size = 2
encoder_channels = 4
decoder_channels = 8, 4
metadata_embed_dim = 8
radius_min = 2.0
radius_max = 3.5
"""

MICRO_CLS = """
extent = 20
n_train = 4
n_eval = 2
steps = 3
batch = 4
stage_channels = 4, 8
film_stages = 1
slices_per_volume = 2
trials = 3
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# exit codes


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 1
    assert "subcommand is required" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_flag_is_usage_error(capsys):
    assert main(["gradcheck", "--no-such-flag"]) == 1


def test_missing_config_file(capsys):
    assert main(["sweep", "--config", "/nonexistent/path.cfg"]) == 1
    assert "cannot read config file" in capsys.readouterr().err


def test_unknown_config_key_names_it(tmp_path, capsys):
    cfg = _write(tmp_path, "bad.cfg", "not_a_key = 1\n")
    assert main(["sweep", "--config", cfg]) == 1
    assert "not_a_key" in capsys.readouterr().err


def test_unparseable_config_value_names_key(tmp_path, capsys):
    cfg = _write(tmp_path, "bad.cfg", "steps = many\n")
    assert main(["sweep", "--config", cfg]) == 1
    err = capsys.readouterr().err
    assert "steps" in err and "many" in err


def test_numeric_failure_exits_two(monkeypatch, capsys):
    monkeypatch.setattr(cli, "gradcheck_suite", lambda seed: {"matmul": 1.0})
    assert main(["gradcheck"]) == 2
    out = capsys.readouterr()
    assert "FAIL" in out.out
    assert "numeric failure" in out.err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes_and_reports(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    for name in ("matmul", "masked_softmax", "layer_norm", "conv2d", "conv3d",
                 "film", "attention_block", "combined_loss"):
        assert name in out
    assert out.count("ok") == 8
    assert "FAIL" not in out
    assert GRADCHECK_THRESHOLD == 1e-4


# ---------------------------------------------------------------------------
# complexity


def test_complexity_writes_csv_and_prints_summary(tmp_path, capsys):
    out = tmp_path / "cx"
    assert main(["complexity", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "parameter reduction: 32.2%" in printed
    assert "flop reduction:      49.6%" in printed
    csv_path = out / "complexity_comparison.csv"
    assert csv_path.exists()
    assert f"wrote {csv_path}" in printed
    body = csv_path.read_text()
    assert body.splitlines()[0].startswith("# counting convention")


def test_complexity_is_byte_identical_across_runs(tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["complexity", "--out", str(out_a)]) == 0
    first = capsys.readouterr().out.replace(str(out_a), "OUT")
    assert main(["complexity", "--out", str(out_b)]) == 0
    second = capsys.readouterr().out.replace(str(out_b), "OUT")
    assert first == second
    assert (out_a / "complexity_comparison.csv").read_bytes() == \
        (out_b / "complexity_comparison.csv").read_bytes()


# ---------------------------------------------------------------------------
# training commands on micro configs


def test_train_seg_writes_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, "seg.cfg", MICRO_SEG)
    out = tmp_path / "run"
    assert main(["train-seg", "--config", cfg, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "trained 4 steps" in printed
    assert (out / "checkpoint.ckpt").exists()
    loss_lines = (out / "loss_curve.csv").read_text().strip().split("\n")
    assert loss_lines[0] == "step,loss"
    assert len(loss_lines) == 5


def test_sweep_prints_table_and_writes_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, "seg.cfg", MICRO_SEG)
    out = tmp_path / "run"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "FLAIR" in printed and "average dice" in printed
    csv_lines = (out / "scenarios.csv").read_text().strip().split("\n")
    assert csv_lines[0] == "flair,t1c,t1,t2,dice,n"
    assert len(csv_lines) == 17
    payload = json.loads((out / "scenarios.json").read_text())
    assert len(payload["scenarios"]) == 15
    assert (out / "checkpoint.ckpt").exists()
    assert (out / "loss_curve.csv").exists()


def test_sweep_seed_override_changes_json(tmp_path):
    cfg = _write(tmp_path, "seg.cfg", MICRO_SEG)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s0"), "--seed", "0"]) == 0
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s5"), "--seed", "5"]) == 0
    a = json.loads((tmp_path / "s0" / "scenarios.json").read_text())
    b = json.loads((tmp_path / "s5" / "scenarios.json").read_text())
    assert a["seed"] == 0 and b["seed"] == 5


def test_train_cls_writes_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, "cls.cfg", MICRO_CLS)
    out = tmp_path / "run"
    assert main(["train-cls", "--config", cfg, "--out", str(out)]) == 0
    assert "trained 3 steps" in capsys.readouterr().out
    assert (out / "checkpoint.ckpt").exists()
    assert (out / "loss_curve.csv").exists()


def test_probe_permutation_writes_json(tmp_path, capsys):
    cfg = _write(tmp_path, "cls.cfg", MICRO_CLS)
    out = tmp_path / "run"
    assert main(["probe-permutation", "--config", cfg, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "true accuracy" in printed
    assert "delta" in printed
    payload = json.loads((out / "probe.json").read_text())
    assert set(payload) == {"true_accuracy", "mean_shuffled_accuracy", "delta",
                            "delta_ci_low", "delta_ci_high", "trials", "n_eval_samples"}
    assert payload["trials"] == 3
    assert "model" not in payload
