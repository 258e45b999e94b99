"""Baselines, RMSE, ablation experiments and fusion-weight analysis."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import forecaster, heatmap
from .externals import read_externals_csv, encode_records
from .flowgrid import FlowSeries, read_flw
from .forecaster import Model
from .stresnet import ModelConfig
from .synthcity import SynthConfig, WeatherEvent, generate
from .flowgrid import GridSpec
from .trainer import (InstanceSet, TrainHyper, dataset_rmse, instances_for, minmax_fit,
                      normalize_series, predict_batched, minmax_invert, train)

log = logging.getLogger(__name__)


# --- metric and baselines -------------------------------------------------

def rmse(preds, truths) -> float:
    """Root mean squared error over every element of every tensor."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {truths.shape}")
    if preds.size == 0:
        raise ValueError("no ground truth to evaluate")
    return float(np.sqrt(np.mean((preds - truths) ** 2)))


def period_key(grid: GridSpec, t: int, time_of_day_only: bool = False):
    ts = grid.interval_start(t)
    d = datetime.fromtimestamp(ts, tz=timezone.utc)
    tod = d.hour * 3600 + d.minute * 60 + d.second
    return tod if time_of_day_only else (d.weekday(), tod)


def ha_predict(series: FlowSeries, t: int, time_of_day_only: bool = False) -> np.ndarray:
    """Mean of all strictly earlier intervals sharing t's weekday and time of day."""
    key = period_key(series.grid, t, time_of_day_only)
    matches = [s for s in series.indices() if s < t and period_key(series.grid, int(s), time_of_day_only) == key]
    if not matches:
        raise LookupError(f"no history shares the period key of interval {t}")
    total = np.zeros(series.grid.shape, dtype=np.int64)
    for s in matches:
        total += series[int(s)].astype(np.int64)
    return total / len(matches)


def ha_predict_many(series: FlowSeries, ts, time_of_day_only: bool = False) -> np.ndarray:
    """``ha_predict`` for many targets in one chronological sweep."""
    ts = sorted(int(t) for t in ts)
    sums: dict = {}
    counts: dict = {}
    out = {}
    pending = list(ts)
    idx = list(series.indices())
    k = 0
    for t in pending:
        while k < len(idx) and idx[k] < t:
            s = int(idx[k])
            key = period_key(series.grid, s, time_of_day_only)
            sums[key] = sums.get(key, 0) + series[s].astype(np.int64)
            counts[key] = counts.get(key, 0) + 1
            k += 1
        key = period_key(series.grid, t, time_of_day_only)
        if key not in counts:
            raise LookupError(f"no history shares the period key of interval {t}")
        out[t] = sums[key] / counts[key]
    return np.stack([out[t] for t in ts]) if ts else np.zeros((0,) + series.grid.shape)


def persistence_predict(series: FlowSeries, t: int) -> np.ndarray:
    x = series.get(t - 1)
    if x is None:
        raise LookupError(f"interval {t - 1} is not in the series")
    return x.astype(np.float64)


# --- fusion weights -------------------------------------------------------

@dataclass
class FusionStats:
    threshold: float
    fraction_below: dict[str, float]
    maps: dict[str, np.ndarray]


def fusion_weight_stats(w_c, w_p, w_q, threshold: float = 0.3) -> FusionStats:
    """Share of regions whose |weight| falls below ``threshold``, per component.

    Weight maps shaped (channels, I, J) count every (channel, region) entry.
    """
    maps = {}
    frac = {}
    for name, w in (("closeness", w_c), ("period", w_p), ("trend", w_q)):
        if w is None:
            continue
        w = np.asarray(w, dtype=np.float64)
        maps[name] = w
        frac[name] = float(np.mean(np.abs(w) < threshold))
    return FusionStats(threshold, frac, maps)


def export_fusion_maps(stats: FusionStats, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, w in stats.maps.items():
        for ch in range(w.shape[0]):
            path = out_dir / f"fusion_{name}_ch{ch}.ppm"
            heatmap.write_ppm(path, heatmap.render(np.abs(w[ch])))
            paths.append(path)
    return paths


# --- experiments ----------------------------------------------------------

@dataclass
class ModelSpec:
    name: str
    model: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    dataset: dict = field(default_factory=lambda: {"synth": {}})
    test_days: int = 7
    seeds: list[int] = field(default_factory=lambda: [0])
    baselines: list[str] = field(default_factory=lambda: ["ha"])
    models: list[ModelSpec] = field(default_factory=list)
    multi_step: int = 0
    multi_step_stride: int = 1
    fusion_threshold: float = 0.3

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        d = dict(d)
        d["models"] = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in d.get("models", [])]
        spec = cls(**d)
        if spec.test_days < 1:
            raise ValueError("test_days must be >= 1")
        for b in spec.baselines:
            if b not in ("ha", "persistence"):
                raise ValueError(f"unknown baseline {b!r}")
        if not spec.models and not spec.baselines:
            raise ValueError("experiment has nothing to evaluate")
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ReportRow:
    model: str
    seed: int | None
    rmse: float
    per_step_rmse: list[float] = field(default_factory=list)
    config_hash: str = ""
    train_seconds: float = 0.0
    fusion_fraction_below: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    name: str
    rows: list[ReportRow]
    meta: dict = field(default_factory=dict)

    def by_model(self) -> dict[str, list[ReportRow]]:
        out: dict[str, list[ReportRow]] = {}
        for r in self.rows:
            out.setdefault(r.model, []).append(r)
        return out

    def rmse_of(self, model: str, seed: int | None = None) -> float:
        for r in self.rows:
            if r.model == model and (seed is None or r.seed == seed):
                return r.rmse
        raise KeyError((model, seed))

    def to_dict(self) -> dict:
        return {"name": self.name, "meta": self.meta, "rows": [asdict(r) for r in self.rows]}


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Dataset:
    flows: FlowSeries
    externals: dict[int, np.ndarray]
    ext_dim: int
    period: int


def load_dataset(spec: dict) -> Dataset:
    if "synth" in spec:
        d = dict(spec["synth"])
        if "grid" in d and isinstance(d["grid"], dict):
            d["grid"] = GridSpec.from_dict(d["grid"])
        if d.get("weather_events") is not None:
            d["weather_events"] = [WeatherEvent(**e) for e in d["weather_events"]]
        cfg = SynthConfig(**d)
        out = generate(cfg)
        return Dataset(out.flows, out.externals(), out.schema.dim, cfg.period_intervals)
    if "flows" in spec:
        flows = read_flw(spec["flows"])
        ext, dim = {}, 0
        if spec.get("externals"):
            records, schema = read_externals_csv(spec["externals"])
            ext, dim = encode_records(records, schema), schema.dim
        period = int(spec.get("period", 86400 // flows.grid.interval_seconds))
        return Dataset(flows, ext, dim, period)
    raise ValueError("dataset must name 'synth' or 'flows'")


def _multi_step_rmse(model: Model, flows: FlowSeries, externals, starts, k: int) -> list[float]:
    errs = [[] for _ in range(k)]
    for n in starts:
        hist = flows.window(flows.first_index, n)
        steps = [externals.get(n + s) for s in range(k)] if model.config.ext_dim else None
        recs = forecaster.predict_multi(model, hist, steps, k, now=0.0)
        for s, rec in enumerate(recs):
            errs[s].append((rec.tensor - flows[n + s]) ** 2)
    return [float(np.sqrt(np.mean(e))) for e in errs]


def run_experiment(spec: ExperimentSpec | dict, out_dir=None, figures: bool = True) -> EvalReport:
    """Train and score every model/seed on the dataset's final ``test_days``.

    All models are scored on the same targets: intervals of the test span
    whose history satisfies the longest look-back among the configured
    models.  Normalization statistics come from the pre-test flows.
    """
    if isinstance(spec, dict):
        spec = ExperimentSpec.from_dict(spec)
    ds = load_dataset(spec.dataset)
    flows = ds.flows
    p = ds.period
    test_start = flows.end_index - spec.test_days * p
    if test_start <= flows.first_index:
        raise ValueError("test span covers the whole dataset")
    stats = minmax_fit(flows.window(flows.first_index, test_start))
    norm = normalize_series(flows, stats)

    configs = {}
    for m in spec.models:
        opts = {"period": p, "trend": 7 * p, "ext_dim": ds.ext_dim, **m.model}
        if opts.get("ext_dim") and not ds.ext_dim:
            raise ValueError(f"model {m.name} wants external features the dataset lacks")
        configs[m.name] = ModelConfig(rows=flows.grid.rows, cols=flows.grid.cols, **opts)
    lookback = max([c.lookback for c in configs.values()] + [0])
    first_target = flows.first_index + lookback
    test_ts = [int(t) for t in flows.indices() if t >= test_start and t >= first_target]
    truths = np.stack([flows[t] for t in test_ts]).astype(np.float64)

    rows: list[ReportRow] = []
    for b in spec.baselines:
        if b == "ha":
            preds = ha_predict_many(flows, test_ts)
        else:
            preds = np.stack([persistence_predict(flows, t) for t in test_ts])
        rows.append(ReportRow(b.upper() if b == "ha" else b, None, rmse(preds, truths),
                              config_hash=config_hash(b, spec.dataset, spec.test_days)))

    starts = test_ts[::max(spec.multi_step_stride, 1)]
    if spec.multi_step:
        starts = [n for n in starts if n + spec.multi_step - 1 in flows]
    fitted: dict[tuple[str, int], Model] = {}
    for m in spec.models:
        cfg = configs[m.name]
        hyper = TrainHyper.from_dict(m.hyper)
        data = instances_for(cfg, norm, ds.externals)
        data = data.where(data.t >= first_target)
        train_set = data.where(data.t < test_start)
        test_set = data.where(np.isin(data.t, test_ts))
        for seed in spec.seeds:
            t0 = time.perf_counter()
            params, history = train(train_set, cfg, hyper, seed, stats)
            elapsed = time.perf_counter() - t0
            score = dataset_rmse(params, cfg, test_set, stats)
            model = Model(params, cfg, stats, config_hash(m.name, seed))
            fitted[(m.name, seed)] = model
            row = ReportRow(m.name, seed, score,
                            config_hash=config_hash(cfg.to_dict(), asdict(hyper), seed, spec.dataset),
                            train_seconds=elapsed)
            if spec.multi_step:
                row.per_step_rmse = _multi_step_rmse(model, flows, ds.externals, starts, spec.multi_step)
            if cfg.fusion == "matrix":
                fw = {b: params.get(f"fusion.{b}") for b in ("c", "p", "q")}
                row.fusion_fraction_below = fusion_weight_stats(
                    fw["c"], fw["p"], fw["q"], spec.fusion_threshold).fraction_below
            log.info("%s seed=%s rmse=%.4f (%.1fs, %d epochs)", m.name, seed, score, elapsed, len(history))
            rows.append(row)

    report = EvalReport(spec.name, rows, {
        "test_start": test_start, "n_test": len(test_ts), "norm": [stats.min, stats.max],
        "spec_hash": config_hash(asdict(spec)),
    })
    report.models = fitted  # not serialized; lets callers reuse trained models
    if out_dir is not None:
        write_report(report, out_dir, figures=figures)
        if figures:
            for (name, seed), model in fitted.items():
                if model.config.fusion == "matrix":
                    fw = {b: model.params.get(f"fusion.{b}") for b in ("c", "p", "q")}
                    st = fusion_weight_stats(fw["c"], fw["p"], fw["q"], spec.fusion_threshold)
                    export_fusion_maps(st, Path(out_dir) / f"weights_{name}_seed{seed}")
                    from . import plotting
                    plotting.weight_maps(st.maps, Path(out_dir) / f"fusion_{name}_seed{seed}.png", st.threshold)
    return report


def write_report(report: EvalReport, out_dir, figures: bool = True) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        k = max((len(r.per_step_rmse) for r in report.rows), default=0)
        w.writerow(["model", "seed", "rmse", "config_hash", "train_seconds"]
                   + [f"step{s + 1}_rmse" for s in range(k)])
        for r in report.rows:
            w.writerow([r.model, "" if r.seed is None else r.seed, f"{r.rmse:.6f}", r.config_hash,
                        f"{r.train_seconds:.2f}"]
                       + [f"{v:.6f}" for v in r.per_step_rmse] + [""] * (k - len(r.per_step_rmse)))
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if figures:
        from . import plotting
        plotting.rmse_bars(report, out_dir / "rmse.png")
        if any(r.per_step_rmse for r in report.rows):
            plotting.step_curves(report, out_dir / "multistep.png")
