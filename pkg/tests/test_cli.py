from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from hybridcomm.cli import EXIT_BAD_CONFIG, cmd_codec_bench, main

CONFIG = """
[topology]
preset = lassen-like

[layout]
dp = 2
pp = 2
tp = 2

[model]
num_blocks = 2
input_dim = 16
hidden_dim = 32
output_dim = 16
batch_size = 32
steps = 3

[scheme]
name = {scheme}

[run]
seeds = 0
"""


def write_config(tmp_path, scheme="baseline", extra=""):
    path = tmp_path / f"{scheme}.ini"
    path.write_text(CONFIG.format(scheme=scheme) + extra)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_baseline(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scheme"] == "no-compression"
    assert summary["diverged"] is False
    assert len(read_csv(out / "loss.csv")) == 3
    trace = read_csv(out / "trace.csv")
    assert list(trace[0]) == ["step", "path", "collective", "comm_size", "raw_bytes", "wire_bytes", "duration_s"]
    assert {r["path"] for r in trace} == {"PpP2p", "TpAllReduce", "TpAllGather", "DpAllReduce"}


def test_run_z_hybrid_shrinks_lossy_paths(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path, "z-hybrid-16-8")), "--out", str(out)]) == 0
    ledger = json.loads((out / "summary.json").read_text())["bytes_by_path"]
    for path, row in ledger.items():
        assert row["wire_bytes"] < row["raw_bytes"], path


def test_bad_layout_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(CONFIG.format(scheme="baseline").replace("dp = 2", "dp = 3"))
    assert main(["run", "--config", str(path)]) == EXIT_BAD_CONFIG
    assert "layout" in capsys.readouterr().err


def test_bad_field_named(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(CONFIG.format(scheme="baseline").replace("hidden_dim = 32", "hidden_dim = 31"))
    assert main(["validate", "--config", str(path)]) == EXIT_BAD_CONFIG
    assert "model.hidden_dim" in capsys.readouterr().err


def test_bad_seeds_flag(tmp_path, capsys):
    assert main(["run", "--config", str(write_config(tmp_path)), "--seeds", "1,a"]) == EXIT_BAD_CONFIG
    assert "--seeds" in capsys.readouterr().err


def test_diverged_run_exits_0(tmp_path):
    out = tmp_path / "out"
    path = write_config(tmp_path, "naive-zfp2")
    text = path.read_text().replace("steps = 3", "steps = 3\nlearning_rate = 1e30")
    path.write_text(text)
    assert main(["run", "--config", str(path), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["diverged"] is True
    assert summary["final_loss"] is None


def test_sweep_rows_and_ordering(tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep", "--config", str(write_config(tmp_path)), "--out", str(out),
               "--schemes", "baseline,naive-zfp8,naive-zfp16"])
    assert rc == 0
    rows = {r["scheme"]: r for r in read_csv(out / "sweep.csv")}
    assert list(next(iter(rows.values()))) == ["scheme", "world_size", "samples_per_sec", "final_loss"]
    assert set(rows) == {"no-compression", "naive-zfp8", "naive-zfp16"}
    sps = {k: float(v["samples_per_sec"]) for k, v in rows.items()}
    assert sps["naive-zfp8"] > sps["naive-zfp16"] > sps["no-compression"]


def test_sweep_mpc_matches_baseline_loss(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(write_config(tmp_path)), "--out", str(out),
                 "--schemes", "baseline,naive-mpc"]) == 0
    rows = {r["scheme"]: r for r in read_csv(out / "sweep.csv")}
    assert rows["naive-mpc"]["final_loss"] == rows["no-compression"]["final_loss"]
    assert float(rows["no-compression"]["samples_per_sec"]) >= float(rows["naive-mpc"]["samples_per_sec"])


def test_sweep_over_world_sizes(tmp_path):
    out = tmp_path / "sweep"
    path = write_config(tmp_path)
    path.write_text(path.read_text().replace("batch_size = 32", "batch_size = 96").replace("steps = 3", "steps = 1"))
    assert main(["sweep", "--config", str(path), "--out", str(out), "--schemes", "baseline",
                 "--world-sizes", "8,24,48"]) == 0
    assert [int(r["world_size"]) for r in read_csv(out / "sweep.csv")] == [8, 24, 48]


def test_sweep_unknown_scheme(tmp_path, capsys):
    assert main(["sweep", "--config", str(write_config(tmp_path)), "--schemes", "baseline,warp"]) == EXIT_BAD_CONFIG
    assert "sweep.schemes" in capsys.readouterr().err


def test_sweep_plots(tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(write_config(tmp_path)), "--out", str(out), "--schemes", "baseline",
                 "--plots", "--seeds", "0,1"]) == 0
    assert (out / "loss_vs_step.png").stat().st_size > 0
    assert (out / "samples_per_sec.png").stat().st_size > 0
    assert len(read_csv(out / "sweep_losses.csv")) == 2 * 3


def test_codec_bench():
    rows = cmd_codec_bench([4096], repeats=1)
    ratio = {(r["data"], r["codec"]): r["ratio"] for r in rows}
    assert ratio[("dense", "identity")] == 1.0
    assert ratio[("dense", "fixed:8")] == pytest.approx(4096 * 4 / (64 * 65))
    assert ratio[("sparse", "lossless")] > ratio[("dense", "lossless")]


def test_codec_bench_cli(tmp_path, capsys):
    assert main(["codec-bench", "--sizes", "1024", "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "codec_bench.csv")) == 10
    assert "lossless" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hybridcomm", "validate", "--config", str(write_config(tmp_path))],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "world_size=8" in proc.stdout
