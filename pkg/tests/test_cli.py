"""End-to-end command-line behavior: every subcommand, every exit code."""

import csv
import json
import os
import subprocess
import sys

import pytest

from partsel.cli import SELECTION_HEADER, main
from partsel.config import RunConfig, save_config


def _write_cfg(path, **tweaks):
    cfg = RunConfig()
    cfg.data.n_samples = 24
    cfg.training.epochs = 2
    cfg.training.batch_size = 8
    cfg.training.seed = 11
    for dotted, v in tweaks.items():
        section, key = dotted.split(".")
        setattr(getattr(cfg, section), key, v)
    save_config(cfg, str(path))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: config, generated dataset, one finished training run."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = _write_cfg(root / "config.json")
    data = str(root / "data")
    run = str(root / "run")
    assert main(["gen", "--config", cfg, "--out", data]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--out", run]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run}


# ---------------------------------------------------------------------------
# gen


def test_gen_reports_split_counts(ws, capsys, tmp_path):
    rc = main(["gen", "--config", ws["cfg"], "--out", str(tmp_path / "d")])
    out = capsys.readouterr().out
    assert rc == 0
    assert "wrote 24 samples" in out
    assert "train" in out and "eval" in out


def test_gen_refuses_overwrite(ws, capsys):
    assert main(["gen", "--config", ws["cfg"], "--out", ws["data"]]) == 3
    assert "force" in capsys.readouterr().err


def test_gen_force_overwrites(ws, tmp_path):
    out = str(tmp_path / "d")
    assert main(["gen", "--config", ws["cfg"], "--out", out]) == 0
    assert main(["gen", "--config", ws["cfg"], "--out", out, "--force"]) == 0


def test_gen_missing_config_is_config_error(tmp_path, capsys):
    assert main(["gen", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == 2


def test_gen_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"data": {"n_samples": 4, "momentum": 0.9}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "momentum" in capsys.readouterr().err


def test_gen_rejects_invalid_json(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


# ---------------------------------------------------------------------------
# train


def test_train_outputs(ws, capsys):
    assert os.path.isfile(os.path.join(ws["run"], "metrics.csv"))
    assert os.path.isfile(os.path.join(ws["run"], "training_curves.png"))
    assert os.path.isdir(os.path.join(ws["run"], "checkpoint_best"))
    assert os.path.isdir(os.path.join(ws["run"], "checkpoint_final"))
    with open(os.path.join(ws["run"], "metrics.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert all(r["hit_rate"] != "" for r in rows)


def test_train_refuses_overwrite_without_force(ws, capsys):
    rc = main(["train", "--config", ws["cfg"], "--data", ws["data"], "--out", ws["run"]])
    assert rc == 3
    assert "force" in capsys.readouterr().err


def test_train_missing_dataset(ws, tmp_path):
    rc = main(["train", "--config", ws["cfg"], "--data", str(tmp_path / "no"), "--out", str(tmp_path / "r")])
    assert rc == 3


def test_train_ablation_no_selection_blanks_hit_rate(ws, tmp_path):
    out = str(tmp_path / "r")
    rc = main([
        "train", "--config", ws["cfg"], "--data", ws["data"], "--out", out,
        "--ablation", "no_selection",
    ])
    assert rc == 0
    with open(os.path.join(out, "metrics.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["hit_rate"] == "" for r in rows)


def test_train_divergence_exit_code(ws, tmp_path):
    cfg = _write_cfg(tmp_path / "hot.json", **{"training.base_lr": 1e12})
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rc = main(["train", "--config", cfg, "--data", ws["data"], "--out", str(tmp_path / "r")])
    assert rc == 4


# ---------------------------------------------------------------------------
# eval


def test_eval_report(ws, capsys, tmp_path):
    out = str(tmp_path / "report")
    ckpt = os.path.join(ws["run"], "checkpoint_final")
    assert main(["eval", "--checkpoint", ckpt, "--data", ws["data"], "--out", out]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("mae=")
    mae = float(printed.splitlines()[0].split("=", 1)[1])
    with open(os.path.join(ws["run"], "metrics.csv"), newline="") as fh:
        last = list(csv.DictReader(fh))[-1]
    assert mae == float(last["eval_mae"])  # re-evaluation is bit-reproducible
    assert os.path.isfile(os.path.join(out, "report.csv"))
    assert os.path.isfile(os.path.join(out, "selection.csv"))
    assert os.path.isfile(os.path.join(out, "predictions.png"))
    with open(os.path.join(out, "selection.csv"), newline="") as fh:
        reader = csv.reader(fh)
        assert next(reader) == SELECTION_HEADER


def test_eval_default_report_location(ws):
    ckpt = os.path.join(ws["run"], "checkpoint_best")
    assert main(["eval", "--checkpoint", ckpt, "--data", ws["data"]]) == 0
    assert os.path.isfile(os.path.join(ckpt, "eval_report", "report.csv"))


def test_eval_missing_checkpoint(ws, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path), "--data", ws["data"]]) == 5


def test_eval_image_size_mismatch(ws, tmp_path, capsys):
    cfg32 = _write_cfg(tmp_path / "c32.json", **{"data.image_size": 32, "data.n_samples": 6})
    data32 = str(tmp_path / "d32")
    assert main(["gen", "--config", cfg32, "--out", data32]) == 0
    ckpt = os.path.join(ws["run"], "checkpoint_final")
    assert main(["eval", "--checkpoint", ckpt, "--data", data32]) == 5
    assert "64px" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# export-maps


def test_export_maps_outputs(ws, tmp_path, capsys):
    out = str(tmp_path / "maps")
    ckpt = os.path.join(ws["run"], "checkpoint_final")
    rc = main([
        "export-maps", "--checkpoint", ckpt, "--data", ws["data"],
        "--ids", "s00000,s00003", "--out", out,
    ])
    assert rc == 0
    for sid in ("s00000", "s00003"):
        for level in range(3):
            assert os.path.isfile(os.path.join(out, f"{sid}_relmap_L{level}.prst"))
        assert os.path.isfile(os.path.join(out, f"{sid}_selection.csv"))
        assert os.path.isfile(os.path.join(out, f"{sid}_overview.png"))
    printed = capsys.readouterr().out
    assert "s00000: y_pred=" in printed
    with open(os.path.join(out, "s00000_selection.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert 1 <= len(rows) <= 3
    assert [int(r["rank"]) for r in rows] == list(range(1, len(rows) + 1))
    scores = [float(r["score"]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    assert all(r["confidence"] != "" for r in rows)  # y* known at export time


def test_export_maps_gate_maps_are_probabilities(ws, tmp_path):
    from partsel.prst import read_prst

    out = str(tmp_path / "maps")
    ckpt = os.path.join(ws["run"], "checkpoint_final")
    main(["export-maps", "--checkpoint", ckpt, "--data", ws["data"], "--ids", "s00001", "--out", out])
    m = read_prst(os.path.join(out, "s00001_relmap_L0.prst"))
    assert m.shape == (64, 64)
    assert 0.0 < m.min() and m.max() < 1.0


def test_export_maps_unknown_id(ws, tmp_path, capsys):
    ckpt = os.path.join(ws["run"], "checkpoint_final")
    rc = main(["export-maps", "--checkpoint", ckpt, "--data", ws["data"], "--ids", "s99999", "--out", str(tmp_path)])
    assert rc == 6
    assert "s99999" in capsys.readouterr().err


def test_export_maps_empty_ids(ws, tmp_path):
    ckpt = os.path.join(ws["run"], "checkpoint_final")
    rc = main(["export-maps", "--checkpoint", ckpt, "--data", ws["data"], "--ids", " , ", "--out", str(tmp_path)])
    assert rc == 6


# ---------------------------------------------------------------------------
# inspect-anchors


def test_inspect_anchors_stdout(ws, capsys):
    assert main(["inspect-anchors", "--config", ws["cfg"]]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split(",") == SELECTION_HEADER
    assert len(lines) == 1 + 252  # (64/8)^2*3 + (64/16)^2*3 + (64/32)^2*3


def test_inspect_anchors_file(ws, tmp_path, capsys):
    path = str(tmp_path / "anchors.csv")
    assert main(["inspect-anchors", "--config", ws["cfg"], "--out", path]) == 0
    assert "wrote 252 anchors" in capsys.readouterr().out
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 252
    assert {r["level"] for r in rows} == {"0", "1", "2"}
    first = rows[0]
    assert float(first["x2"]) > float(first["x1"])
    assert first["score"] == "" and first["confidence"] == ""


# ---------------------------------------------------------------------------
# environment and entry point


def test_bad_thread_env_is_config_error(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("PRS_THREADS", "many")
    assert main(["gen", "--config", ws["cfg"], "--out", str(tmp_path / "d")]) == 2


def test_thread_env_must_be_positive(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("PRS_THREADS", "0")
    assert main(["gen", "--config", ws["cfg"], "--out", str(tmp_path / "d")]) == 2


def test_module_entry_point(ws, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "partsel", "inspect-anchors", "--config", ws["cfg"],
         "--out", str(tmp_path / "a.csv")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "wrote 252 anchors" in proc.stdout


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
