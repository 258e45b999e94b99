"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import threading
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, heatmap, kv
from .externals import encode_records, read_externals_csv, write_externals_csv
from .flowgrid import GridSpec, build_series, read_flw, read_trajectory_csv, write_flw
from .forecaster import Model, export_forecasts, future_externals, predict_multi
from .stresnet import ModelConfig
from .trainer import (TrainHyper, dataset_rmse, instances_for, load_checkpoint, minmax_fit,
                      normalize_series, save_checkpoint, train, validation_split, write_history_csv)

log = logging.getLogger("cityflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- synth ----------------------------------------------------------------

def cmd_synth(args):
    from .synthcity import SynthConfig, generate

    opts = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("n_days", "n_agents", "seed"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    if isinstance(opts.get("grid"), dict):
        opts["grid"] = GridSpec.from_dict(opts["grid"])
    cfg = SynthConfig(**opts)
    out = generate(cfg)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "trajectories.csv").write_text(out.csv_text())
    write_externals_csv(d / "externals.csv", out.records, out.schema)
    write_flw(d / "flows.flw", out.flows)
    _write_json(d / "grid.json", cfg.grid.to_dict())
    print(f"{len(out.points.timestamp)} points, {len(out.flows)} intervals -> {d}")


# --- flows ----------------------------------------------------------------

def cmd_flows(args):
    grid = GridSpec.load(args.grid)
    table = read_trajectory_csv(args.inp)
    coverage = None
    if args.coverage:
        lo, _, hi = args.coverage.partition(":")
        coverage = [(int(lo), int(hi))]
    series, summary = build_series(grid, table, coverage)
    write_flw(args.out, series)
    print(json.dumps(asdict(summary)))


# --- train / evaluate -----------------------------------------------------

def _load_training_inputs(flows_path, grid_path, externals_path):
    grid = GridSpec.load(grid_path)
    flows = read_flw(flows_path, grid)
    ext, dim = {}, 0
    if externals_path:
        records, schema = read_externals_csv(externals_path)
        ext, dim = encode_records(records, schema), schema.dim
    return grid, flows, ext, dim


def _train_window(flows, grid, holdout_days: int):
    """First interval of the held-out tail (the series end when nothing is held out)."""
    per_day = 86400 // grid.interval_seconds
    end = flows.end_index - holdout_days * per_day
    if end <= flows.first_index:
        raise ValueError("holdout covers the whole series")
    return end


def cmd_train(args):
    spec = json.loads(Path(args.config).read_text())
    base = Path(args.config).parent
    resolve = lambda p: str(base / p) if p and not Path(p).is_absolute() else p
    grid, flows, ext, dim = _load_training_inputs(resolve(spec["flows"]), resolve(spec["grid"]),
                                                  resolve(spec.get("externals")))
    per_day = 86400 // grid.interval_seconds
    model_opts = {"period": per_day, "trend": 7 * per_day, "ext_dim": dim, **spec.get("model", {})}
    cfg = ModelConfig(rows=grid.rows, cols=grid.cols, **model_opts)
    hyper = TrainHyper.from_dict(spec.get("hyper", {}))
    seed = int(spec.get("seed", 0))
    holdout = int(spec.get("holdout_days", 0))
    end = _train_window(flows, grid, holdout)
    stats = minmax_fit(flows.window(flows.first_index, end))
    data = instances_for(cfg, normalize_series(flows, stats), ext)
    data = data.where(data.t < end)
    params, history = train(data, cfg, hyper, seed, stats)
    meta = {"seed": seed, "hyper": asdict(hyper), "train_end": end, "holdout_days": holdout,
            "final_val_rmse": history[-1].val_rmse if history else None}
    ckpt_id = save_checkpoint(params, stats, cfg, args.out, meta)
    if args.history:
        write_history_csv(args.history, history)
        if args.figure:
            from . import plotting
            plotting.history(history, args.figure)
    print(json.dumps({"checkpoint": str(args.out), "checkpoint_id": ckpt_id, "epochs": len(history),
                      "final_val_rmse": meta["final_val_rmse"]}))


def _evaluate_checkpoint(args):
    ckpt = load_checkpoint(args.checkpoint)
    grid, flows, ext, _ = _load_training_inputs(args.flows, args.grid, args.externals)
    cfg, stats, meta = ckpt.config, ckpt.stats, ckpt.meta
    if "train_end" not in meta:
        raise ValueError("checkpoint does not record its training window")
    hyper = TrainHyper.from_dict(meta.get("hyper", {}))
    data = instances_for(cfg, normalize_series(flows, stats), ext)
    val = validation_split(data.where(data.t < meta["train_end"]), hyper, meta.get("seed", 0))
    out = {"checkpoint_id": ckpt.checkpoint_id, "val_rmse": dataset_rmse(ckpt.params, cfg, val, stats),
           "n_val": len(val)}
    test = data.where(data.t >= meta["train_end"])
    if len(test):
        from .evaluation import ha_predict_many, rmse
        out["test_rmse"] = dataset_rmse(ckpt.params, cfg, test, stats)
        truths = np.stack([flows[int(t)] for t in test.t]).astype(np.float64)
        out["test_ha_rmse"] = rmse(ha_predict_many(flows, test.t), truths)
        out["n_test"] = len(test)
    return out


def cmd_evaluate(args):
    if args.experiment:
        from .evaluation import run_experiment
        report = run_experiment(json.loads(Path(args.experiment).read_text()), args.out_dir,
                                figures=not args.no_figures)
        for r in report.rows:
            print(f"{r.model}\t{'' if r.seed is None else r.seed}\t{r.rmse:.4f}")
        return
    if not (args.checkpoint and args.flows and args.grid):
        raise UsageError("evaluate needs --experiment, or --checkpoint with --flows and --grid")
    out = _evaluate_checkpoint(args)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out_dir) / "evaluation.json", out)
    print(json.dumps(out, sort_keys=True))


# --- predict --------------------------------------------------------------

def cmd_predict(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = Model.from_checkpoint(ckpt)
    grid = GridSpec.load(args.grid)
    flows = read_flw(args.flows, grid)
    end = args.end if args.end is not None else flows.end_index
    history = flows.window(flows.first_index, end)
    externals = None
    if model.config.ext_dim:
        if not args.externals:
            raise ValueError("this model uses external features; pass --externals")
        records, schema = read_externals_csv(args.externals)
        externals = future_externals(args.policy, end, args.steps, grid, schema, records)
    records = predict_multi(model, history, externals, args.steps)
    export_forecasts(records, grid, args.out, horizon=args.steps)
    print(json.dumps({"first_interval": records[0].t, "steps": len(records), "out": str(args.out)}))


# --- heatmap --------------------------------------------------------------

def cmd_heatmap(args):
    grid = GridSpec.load(args.grid)
    flows = read_flw(args.flows, grid)
    t = args.t if args.t is not None else flows.end_index - 1
    if t not in flows:
        raise ValueError(f"interval {t} is not in {args.flows}")
    heatmap.heatmap_export(flows[t], args.channel, args.out)
    print(str(args.out))


# --- pipeline / serve -----------------------------------------------------

def cmd_pipeline(args):
    from .pipeline import Pipeline, PipelineConfig, batches_by_interval, traj_key

    cfg = PipelineConfig.load(args.config)
    pipe = Pipeline.from_config(cfg)
    start = args.start if args.start is not None else pipe.series.end_index
    batches = batches_by_interval(Path(args.feed).read_text(), pipe.grid) if args.feed else {}
    rows = []
    for k in range(args.ticks):
        t = start + k
        if t in batches:
            pipe.cache.set(traj_key(t), batches[t])
        report = pipe.tick(pipe.grid.interval_start(t + 1))
        rows.append(report)
        print(f"{report.interval}\t{report.status}\t" +
              "\t".join(f"{s}={v:.2f}ms" for s, v in report.stages_ms.items()) +
              (f"\t{report.message}" if report.message else ""))
    if args.report:
        with open(args.report, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["interval", "status", "pull_ms", "convert_ms", "predict_ms", "push_ms", "message"])
            for r in rows:
                w.writerow([r.interval, r.status, *(f"{r.stages_ms[s]:.3f}" for s in r.stages_ms), r.message])
    if any(r.status == "error" for r in rows):
        raise RuntimeError("one or more ticks failed")


def cmd_serve(args):
    import uvicorn

    from .api import create_app
    from .pipeline import Pipeline, PipelineConfig, run_loop

    cfg = PipelineConfig.load(args.config)
    pipe = Pipeline.from_config(cfg)
    stop = threading.Event()
    worker = threading.Thread(target=run_loop, args=(pipe, cfg.tick_seconds, stop), daemon=True)
    worker.start()
    try:
        uvicorn.run(create_app(lambda: pipe.snapshot), host=args.host, port=args.port, log_level="info")
    finally:
        stop.set()


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cityflow", description="Grid crowd-flow forecasting toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic city (trajectories, externals, flows)")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--config", help="JSON with generator settings")
    s.add_argument("--n-days", dest="n_days", type=int, help="simulated days")
    s.add_argument("--n-agents", dest="n_agents", type=int, help="simulated agents")
    s.add_argument("--seed", type=int, help="generator seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("flows", help="aggregate a trajectory CSV into FLW1 flows")
    s.add_argument("--in", dest="inp", required=True, help="trajectory CSV")
    s.add_argument("--grid", required=True, help="grid JSON")
    s.add_argument("--out", required=True, help="output FLW1 file")
    s.add_argument("--coverage", help="observed interval span START:END (half-open)")
    s.set_defaults(func=cmd_flows)

    s = sub.add_parser("train", help="train a model from a training JSON")
    s.add_argument("--config", required=True, help="training JSON (paths, model, hyper, seed, holdout_days)")
    s.add_argument("--out", required=True, help="output STRN checkpoint")
    s.add_argument("--history", help="write per-epoch history CSV")
    s.add_argument("--figure", help="also plot the history to this PNG (needs --history)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="multi-step forecast from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--flows", required=True, help="observed FLW1 history")
    s.add_argument("--grid", required=True)
    s.add_argument("--externals", help="externals CSV (models with external features)")
    s.add_argument("--policy", choices=["forecast", "hold-last"], default="hold-last",
                   help="external features for future steps")
    s.add_argument("--steps", type=int, default=1, help="forecast horizon k")
    s.add_argument("--end", type=int, help="forecast from this interval (default: series end)")
    s.add_argument("--out", required=True, help="output FLW1 (a .json sidecar is written next to it)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score a checkpoint, or run an experiment report")
    s.add_argument("--checkpoint")
    s.add_argument("--flows")
    s.add_argument("--grid")
    s.add_argument("--externals")
    s.add_argument("--experiment", help="experiment spec JSON (writes CSV, JSON and figures)")
    s.add_argument("--out-dir", help="report directory")
    s.add_argument("--no-figures", action="store_true", help="skip PNG/PPM output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("heatmap", help="render one interval as a PPM heatmap")
    s.add_argument("--flows", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--t", type=int, help="interval index (default: last)")
    s.add_argument("--channel", choices=["in", "out"], default="in")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("pipeline", help="run pull/convert/predict/push ticks")
    s.add_argument("--config", required=True, help="pipeline JSON")
    s.add_argument("--ticks", type=int, default=1)
    s.add_argument("--start", type=int, help="first interval to process")
    s.add_argument("--feed", help="trajectory CSV to push into the cache before each tick")
    s.add_argument("--report", help="write tick reports as CSV")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("serve", help="run the pipeline loop and the HTTP API")
    s.add_argument("--config", required=True, help="pipeline JSON")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"cityflow: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError, kv.CacheError) as e:
        print(f"cityflow: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
