"""Command-line experiment runner.

    hybridcomm run --config exp.ini --out results/
    hybridcomm sweep --config exp.ini --schemes baseline,naive-zfp8,naive-zfp16
    hybridcomm codec-bench --sizes 4096,1048576
    hybridcomm validate --config exp.ini
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .codec import CodecSpec, compress, decompress
from .config import ConfigError, ExperimentConfig, load_config
from .netsim import TraceEvent
from .parallel3d import InvalidScheme, named_scheme
from .toymodel import RunMetrics, run_experiment

EXIT_OK = 0
EXIT_BAD_CONFIG = 2

SWEEP_COLUMNS = ("scheme", "world_size", "samples_per_sec", "final_loss")


def _csv_float(x: float) -> str:
    return repr(float(x))


def write_trace_csv(path: Path, events: list[TraceEvent]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TraceEvent.CSV_COLUMNS)
        w.writerows(ev.csv_row() for ev in events)


def write_loss_csv(path: Path, metrics: RunMetrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "train_loss"))
        for i, loss in enumerate(metrics.train_loss):
            w.writerow((i, _csv_float(loss)))


def _run_one(cfg: ExperimentConfig) -> tuple[RunMetrics, list[TraceEvent]]:
    return run_experiment(cfg.model, cfg.layout(), cfg.scheme, cfg.zero1)


def cmd_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Run one experiment (first seed) and write loss.csv, trace.csv and summary.json."""
    cfg = cfg.with_seed(cfg.seeds[0])
    metrics, events = _run_one(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_loss_csv(out_dir / "loss.csv", metrics)
    write_trace_csv(out_dir / "trace.csv", events)
    summary = {**metrics.summary(), "world_size": cfg.topology.world_size, "seed": cfg.model.seed,
               "layout": {"dp": cfg.dp, "pp": cfg.pp, "tp": cfg.tp, "zero1": cfg.zero1},
               "scheme_table": cfg.scheme.to_dict()["paths"]}
    if not math.isfinite(summary["final_loss"]):
        summary["final_loss"] = None
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _sweep_entry(args):
    cfg, scheme_name, world_size, seed = args
    metrics, _ = _run_one(cfg)
    return scheme_name, world_size, seed, metrics


def _scaled(cfg: ExperimentConfig, world_size: int) -> ExperimentConfig:
    gpn = cfg.topology.gpus_per_node
    if world_size % gpn:
        raise ConfigError("sweep.world_sizes", f"{world_size} is not a multiple of gpus_per_node={gpn}")
    mp = cfg.pp * cfg.tp
    if world_size % mp:
        raise ConfigError("sweep.world_sizes", f"{world_size} is not a multiple of pp*tp={mp}")
    topo = cfg.topology.with_nodes(world_size // gpn)
    return dataclasses.replace(cfg, topology=topo, dp=world_size // mp).validate()


def cmd_sweep(cfg: ExperimentConfig, out_dir: Path, schemes: list[str], world_sizes: list[int] | None = None,
              jobs: int = 1, plots: bool = False) -> list[dict]:
    """Run every (scheme, world size, seed); write sweep.csv, sweep_losses.csv and optional plots."""
    world_sizes = world_sizes or [cfg.topology.world_size]
    tasks = []
    for name in schemes:
        try:
            scheme = named_scheme(name)
        except InvalidScheme as exc:
            raise ConfigError("sweep.schemes", str(exc)) from None
        for ws in world_sizes:
            scaled = dataclasses.replace(_scaled(cfg, ws), scheme=scheme)
            for seed in cfg.seeds:
                tasks.append((scaled.with_seed(seed), scheme.name, ws, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_entry, tasks))
    else:
        results = [_sweep_entry(t) for t in tasks]

    rows = []
    grouped: dict[tuple[str, int], list[RunMetrics]] = {}
    for scheme_name, ws, _, metrics in results:
        grouped.setdefault((scheme_name, ws), []).append(metrics)
    for (scheme_name, ws), runs in grouped.items():
        rows.append({
            "scheme": scheme_name,
            "world_size": ws,
            "samples_per_sec": float(np.mean([m.samples_per_sec for m in runs])),
            "final_loss": float(np.mean([m.final_loss for m in runs])),
        })

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow((r["scheme"], r["world_size"], _csv_float(r["samples_per_sec"]), _csv_float(r["final_loss"])))
    with open(out_dir / "sweep_losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scheme", "world_size", "seed", "step", "train_loss"))
        for scheme_name, ws, seed, metrics in results:
            for i, loss in enumerate(metrics.train_loss):
                w.writerow((scheme_name, ws, seed, i, _csv_float(loss)))
    if plots:
        _plot_sweep(out_dir, rows, results)
    return rows


def _plot_sweep(out_dir: Path, rows: list[dict], results):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for scheme_name, ws, seed, metrics in results:
        ax.plot(metrics.train_loss, label=f"{scheme_name} (ws={ws}, seed={seed})", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("train loss")
    ax.set_yscale("log")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_dir / "loss_vs_step.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{r['scheme']}\nws={r['world_size']}" for r in rows]
    ax.bar(range(len(rows)), [r["samples_per_sec"] for r in rows])
    ax.set_xticks(range(len(rows)), labels, fontsize=6)
    ax.set_ylabel("simulated samples / s")
    fig.tight_layout()
    fig.savefig(out_dir / "samples_per_sec.png", dpi=120)
    plt.close(fig)


BENCH_CODECS = ("identity", "lossless", "fixed:8", "fixed:16", "fixed:24")


def synthetic_buffers(n: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Gradient-like (mostly zeros) and activation-like (dense Gaussian) buffers."""
    rng = np.random.default_rng(seed)
    sparse = np.zeros(n, dtype=np.float32)
    hot = rng.random(n) < 0.05
    sparse[hot] = (rng.standard_normal(int(hot.sum())) * 1e-3).astype(np.float32)
    dense = rng.standard_normal(n).astype(np.float32)
    return {"sparse": sparse, "dense": dense}


def cmd_codec_bench(sizes: list[int], codecs=BENCH_CODECS, repeats: int = 3) -> list[dict]:
    rows = []
    for n in sizes:
        for data_kind, buf in synthetic_buffers(n).items():
            for name in codecs:
                spec = CodecSpec.parse(name)
                best_c = best_d = float("inf")
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    cbuf = compress(spec, buf)
                    t1 = time.perf_counter()
                    decompress(cbuf)
                    t2 = time.perf_counter()
                    best_c, best_d = min(best_c, t1 - t0), min(best_d, t2 - t1)
                rows.append({
                    "size": n, "data": data_kind, "codec": name,
                    "ratio": buf.nbytes / cbuf.wire_bytes if cbuf.wire_bytes else 1.0,
                    "compress_MBps": buf.nbytes / best_c / 1e6 if best_c > 0 else float("inf"),
                    "decompress_MBps": buf.nbytes / best_d / 1e6 if best_d > 0 else float("inf"),
                })
    return rows


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridcomm", description="Hybrid compression 3D-parallel simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("--config", required=need_config, help="experiment config (.ini or .json)")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seeds", help="comma-separated seeds (overrides [run] seeds)")
        p.add_argument("--plots", action="store_true", help="also write PNG plots")

    common(sub.add_parser("run", help="run one experiment"))
    sw = sub.add_parser("sweep", help="compare schemes under identical seeds")
    common(sw)
    sw.add_argument("--schemes", default="baseline,naive-zfp8,naive-zfp16",
                    help="comma-separated scheme names")
    sw.add_argument("--world-sizes", help="comma-separated world sizes; dp scales, pp and tp stay fixed")
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    cb = sub.add_parser("codec-bench", help="compression ratio and throughput per codec")
    cb.add_argument("--sizes", default="4096,65536,1048576")
    cb.add_argument("--out", help="write codec_bench.csv here")
    common(sub.add_parser("validate", help="check a config and exit"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "codec-bench":
            rows = cmd_codec_bench(_int_list(args.sizes))
            cols = ("size", "data", "codec", "ratio", "compress_MBps", "decompress_MBps")
            print(" ".join(f"{c:>15}" for c in cols))
            for r in rows:
                print(" ".join(f"{r[c]:>15.3f}" if isinstance(r[c], float) else f"{r[c]:>15}" for c in cols))
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                with open(Path(args.out) / "codec_bench.csv", "w", newline="") as fh:
                    w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
                    w.writeheader()
                    w.writerows(rows)
            return EXIT_OK

        cfg = load_config(args.config)
        if args.seeds:
            try:
                seeds = tuple(_int_list(args.seeds))
            except ValueError:
                raise ConfigError("--seeds", f"expected comma-separated integers, got {args.seeds!r}") from None
            cfg = dataclasses.replace(cfg, seeds=seeds).validate()
        out_dir = Path(args.out or cfg.out_dir)

        if args.command == "validate":
            print(f"ok: world_size={cfg.topology.world_size} dp={cfg.dp} pp={cfg.pp} tp={cfg.tp} "
                  f"scheme={cfg.scheme.name}")
            return EXIT_OK
        if args.command == "run":
            summary = cmd_run(cfg, out_dir)
            state = "DIVERGED" if summary["diverged"] else "done"
            print(f"{state}: scheme={summary['scheme']} final_loss={summary['final_loss']} "
                  f"samples_per_sec={summary['samples_per_sec']:.1f} -> {out_dir}")
            return EXIT_OK
        if args.command == "sweep":
            world_sizes = _int_list(args.world_sizes) if args.world_sizes else None
            rows = cmd_sweep(cfg, out_dir, [s for s in args.schemes.split(",") if s.strip()], world_sizes,
                             args.jobs, args.plots or cfg.plots)
            for r in rows:
                print(f"{r['scheme']:>18} ws={r['world_size']:<4} samples/s={r['samples_per_sec']:.1f} "
                      f"final_loss={r['final_loss']:.6g}")
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
