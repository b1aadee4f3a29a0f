"""Command line entry point: generate, train, evaluate, sweep.

Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from dataclasses import replace
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError, NumericalError, ParseError, PTDNetError
from .graph import (calibrate_noise, edge_label_stats, inject_noise, load_graph_dir,
                    spectral_communities, synthesize, write_graph)
from .tasks import split_edges
from .trainer import MODES, TrainState, evaluate, load_checkpoint, run_training

log = logging.getLogger("ptdnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# --------------------------------------------------------------------------
# shared plumbing

def build_dataset(cfg: ExperimentConfig, seed: int):
    """Graph, optional link split and optional communities for one run."""
    data_dir = cfg.get("data.dir")
    if data_dir:
        graph = load_graph_dir(data_dir)
    else:
        synth = cfg.synth_config(seed)
        target = cfg.get("synth.target_positive_ratio")
        if target is not None:
            synth = replace(synth, noise_strength=calibrate_noise(synth, target, seeds=(seed,)))
        graph = synthesize(synth)
    extra = cfg.get("data.inject_noise")
    if extra:
        graph = inject_noise(graph, extra, seed=[seed, 1])
    link = None
    if cfg.get("train.task") == "link":
        link = split_edges(graph, np.random.default_rng([seed, 2]))
    communities = None
    if cfg.get("data.communities"):
        base = link.train_graph if link is not None else graph
        communities = spectral_communities(base, k=cfg.get("data.communities"), seed=seed)
    return graph, link, communities


def run_one(cfg: ExperimentConfig, seed: int, out_dir) -> dict:
    """Train one configuration/seed pair and write its artifacts under ``out_dir``."""
    out = Path(out_dir)
    cfg = cfg.with_values(experiment__seeds=(seed,))
    cfg.write(out)
    graph, link, communities = build_dataset(cfg, seed)
    t0 = time.perf_counter()
    result = run_training(graph, cfg.train_config(seed), out_dir=out, link=link,
                          communities=communities, resolved_config=cfg.resolved())
    result.pop("_state")
    result["wall_time"] = time.perf_counter() - t0
    return result


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["experiment__seeds"] = (args.seed,)
    if getattr(args, "mode", None) is not None:
        updates["train__mode"] = args.mode
    return cfg.with_values(**updates) if updates else cfg


# --------------------------------------------------------------------------
# commands

def cmd_generate(cfg: ExperimentConfig, out) -> dict:
    seed = cfg.seeds[0]
    synth = cfg.synth_config(seed)
    target = cfg.get("synth.target_positive_ratio")
    if target is not None:
        synth = replace(synth, noise_strength=calibrate_noise(synth, target, seeds=(seed,)))
    graph = synthesize(synth)
    write_graph(graph, out)
    stats = edge_label_stats(graph)
    prov = {
        "seed": seed,
        "config": cfg.resolved(),
        "noise_strength": synth.noise_strength,
        "nodes": graph.n,
        "edges": graph.num_edges,
        "positive_edges": stats.positive_count,
        "negative_edges": stats.negative_count,
        "negative_ratio": stats.negative_ratio,
        "positive_ratio": 1.0 - stats.negative_ratio,
    }
    Path(out, "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return prov


def cmd_train(cfg: ExperimentConfig, out) -> dict:
    result = run_one(cfg, cfg.seeds[0], out)
    return {k: result[k] for k in ("mode", "seed", "epochs_run", "best_epoch", "val", "test")}


def cmd_evaluate(run_dir, split: str = "test") -> dict:
    """Rebuild a finished run from its resolved config and checkpoint, then evaluate."""
    run_dir = Path(run_dir)
    resolved = json.loads((run_dir / "config.resolved.json").read_text(encoding="utf-8"))
    text = "\n".join(f"{k} = {_render(v)}" for k, v in resolved.items()
                     if not k.startswith("sweep."))
    cfg = load_config(text=text)
    seed = cfg.seeds[0]
    graph, link, communities = build_dataset(cfg, seed)
    state = TrainState(graph, cfg.train_config(seed), link=link, communities=communities)
    arrays = load_checkpoint(run_dir / "checkpoint.bin")
    if len(arrays) != len(state.parameters()):
        raise ConfigError(f"checkpoint holds {len(arrays)} arrays, model needs "
                          f"{len(state.parameters())}")
    state.restore(arrays)
    out = evaluate(state, split)
    (run_dir / f"evaluation_{split}.json").write_text(
        json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _render(v) -> str:
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return str(v)


def grid_points(grid: dict) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_job(args):
    cfg, seed, run_dir = args
    try:
        return run_one(cfg, seed, run_dir), None
    except PTDNetError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def summary_metrics(result: dict) -> dict:
    test = result["test"]
    row = {}
    if result["task"] == "node":
        row["test_acc"] = test["acc"]
        row["val_acc"] = result["val"]["acc"]
    else:
        row["test_auc"] = test["auc"]
        row["test_ap"] = test["ap"]
    row["mean_z_pos"] = test["mean_z_pos"]
    row["mean_z_neg"] = test["mean_z_neg"]
    row["edges_retained_fraction"] = test["expected_retained_fraction"]
    if "cross_comm_ratio" in test:
        row["cross_comm_ratio"] = test["cross_comm_ratio"]
    row["wall_time"] = result["wall_time"]
    return row


def aggregate(points: list[dict], results: list[list[dict | None]]) -> list[dict]:
    """One row per grid point: mean and std of each metric over successful seeds."""
    rows = []
    for params, runs in zip(points, results):
        ok = [summary_metrics(r) for r in runs if r is not None]
        row = dict(params)
        row["runs"] = len(ok)
        row["failures"] = len(runs) - len(ok)
        if ok:
            for key in ok[0]:
                vals = np.array([m[key] for m in ok], dtype=np.float64)
                row[f"{key}_mean"] = float(vals.mean())
                row[f"{key}_std"] = float(vals.std())
        rows.append(row)
    return rows


def cmd_sweep(cfg: ExperimentConfig, out) -> list[dict]:
    out = Path(out)
    points = grid_points(cfg.grid) if cfg.grid else [{}]
    jobs = []
    for i, params in enumerate(points):
        point_cfg = cfg.with_values(**{k.replace(".", "__"): v for k, v in params.items()})
        for seed in cfg.seeds:
            jobs.append((point_cfg, seed, out / f"point{i:03d}" / f"seed{seed}"))
    workers = max(1, cfg.get("experiment.workers"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_job, jobs))
    else:
        outcomes = [_sweep_job(j) for j in jobs]
    per_point: list[list] = [[] for _ in points]
    failures = []
    for (job, (res, err)) in zip(jobs, outcomes):
        idx = int(job[2].parent.name[len("point"):])
        per_point[idx].append(res)
        if err is not None:
            failures.append({"run": str(job[2]), "error": err})
    rows = aggregate(points, per_point)
    out.mkdir(parents=True, exist_ok=True)
    columns = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    (out / "sweep.json").write_text(json.dumps({"config": cfg.resolved(), "rows": rows,
                                                "failures": failures}, indent=2) + "\n",
                                    encoding="utf-8")
    return rows


# --------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptdnet", description="Learned edge denoising for GCNs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("generate", "write a synthetic dataset"),
                       ("train", "train one run"),
                       ("sweep", "run a Cartesian grid over seeds")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=MODES, default=None)
    p = sub.add_parser("evaluate", help="re-evaluate a finished run from its checkpoint")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            payload = cmd_evaluate(args.out, args.split)
        else:
            cfg = _apply_flags(load_config(args.config), args)
            if args.command == "generate":
                payload = cmd_generate(cfg, args.out)
            elif args.command == "train":
                payload = cmd_train(cfg, args.out)
            else:
                payload = cmd_sweep(cfg, args.out)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(payload, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
