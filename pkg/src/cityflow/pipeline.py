"""The pull -> convert -> predict -> push loop and its read-only snapshot.

Trajectory batches live in the cache under ``traj:<t>`` (trajectory CSV) and
forecasts are pushed under ``flow:pred:<t>`` (one FLW1 block each).
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kv
from .externals import ExternalRecord, ExternalSchema, read_externals_csv
from .flowgrid import CSV_HEADER, FlowSeries, GridSpec, build_series, parse_trajectory_csv, read_flw
from .forecaster import (DEFAULT_RETENTION, ForecastCache, ForecastRecord, InsufficientHistory, Model,
                         encode_forecast, future_externals, predict_multi)
from .trainer import CheckpointError, load_checkpoint

log = logging.getLogger(__name__)

STAGES = ("pull", "convert", "predict", "push")


def traj_key(t: int) -> str:
    return f"traj:{t}"


def pred_key(t: int) -> str:
    return f"flow:pred:{t}"


@dataclass
class PipelineConfig:
    grid_path: str
    checkpoint_path: str
    history_path: str | None = None
    externals_path: str | None = None
    externals_policy: str = "hold-last"
    cache_url: str | None = "memory://"
    horizon: int = 1
    tick_seconds: float = 1800.0
    retention: int = DEFAULT_RETENTION
    tail: int = 0               # intervals kept in memory; 0 = model look-back + retention

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.tick_seconds > 0:
            raise ValueError("tick interval must be > 0")
        if self.retention < 1:
            raise ValueError("retention must be >= 1")
        if self.externals_policy not in ("forecast", "hold-last"):
            raise ValueError(f"unknown externals policy {self.externals_policy!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TickReport:
    interval: int | None
    status: str                       # ok | noop | skipped | error
    stages_ms: dict[str, float]
    processed: tuple[int, ...] = ()
    forecasts: tuple[int, ...] = ()
    message: str = ""


@dataclass(frozen=True)
class Snapshot:
    """Immutable state served to readers; replaced wholesale after each tick."""
    grid: GridSpec
    intervals: tuple[int, ...]
    flows: np.ndarray                 # (n, 2, I, J) raw counts, read-only
    forecasts: tuple[ForecastRecord, ...]
    ticks: int
    horizon: int

    @property
    def latest(self) -> int:
        return self.intervals[-1]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class Pipeline:
    """Single writer: owns the cache connection, the series tail and the model."""

    def __init__(self, grid: GridSpec, model: Model, cache, history: FlowSeries | None = None,
                 horizon: int = 1, retention: int = DEFAULT_RETENTION,
                 external_records: list[ExternalRecord] | None = None, schema: ExternalSchema | None = None,
                 externals_policy: str = "hold-last", tail: int = 0):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if model.config.ext_dim and (schema is None or not external_records):
            raise ValueError("the model uses external features; supply an externals CSV")
        self.grid = grid
        self.model = model
        self.cache = cache
        self.series = history if history is not None else FlowSeries(grid, [])
        self.horizon = horizon
        self.retention = retention
        self.records = list(external_records or [])
        self.schema = schema
        self.policy = externals_policy
        self.tail = tail or (model.config.lookback + retention)
        self.forecasts = ForecastCache(retention)
        self.ticks = 0
        self._snapshot: Snapshot | None = None

    @classmethod
    def from_config(cls, cfg: PipelineConfig, cache=None) -> "Pipeline":
        grid = GridSpec.load(cfg.grid_path)
        try:
            ckpt = load_checkpoint(cfg.checkpoint_path)
        except FileNotFoundError as e:
            raise CheckpointError(f"checkpoint not found: {cfg.checkpoint_path}") from e
        history = read_flw(cfg.history_path, grid) if cfg.history_path else None
        records, schema = read_externals_csv(cfg.externals_path) if cfg.externals_path else (None, None)
        return cls(grid, Model.from_checkpoint(ckpt), cache if cache is not None else kv.connect(cfg.cache_url),
                   history, cfg.horizon, cfg.retention, records, schema, cfg.externals_policy, cfg.tail)

    @property
    def snapshot(self) -> Snapshot | None:
        return self._snapshot

    def _retry(self, fn, *args):
        try:
            return fn(*args)
        except kv.CacheError as e:
            log.warning("cache call failed (%s), retrying once", e)
            return fn(*args)

    def _externals(self, n: int):
        if not self.model.config.ext_dim:
            return None
        return future_externals(self.policy, n, self.horizon, self.grid, self.schema, self.records)

    def tick(self, now: float) -> TickReport:
        """Process the latest completed interval before wall-clock time ``now``."""
        t = self.grid.interval_of(now) - 1
        ms = dict.fromkeys(STAGES, 0.0)

        if self.series.segments and t < self.series.end_index:
            return TickReport(t, "noop", ms, message="interval already processed")

        t0 = time.perf_counter()
        try:
            raw = self._retry(self.cache.get, traj_key(t))
        except kv.CacheError as e:
            ms["pull"] = (time.perf_counter() - t0) * 1e3
            return TickReport(t, "error", ms, message=f"pull failed: {e}")
        ms["pull"] = (time.perf_counter() - t0) * 1e3
        if raw is None:
            return TickReport(t, "noop", ms, message="no trajectory batch")

        t0 = time.perf_counter()
        table = parse_trajectory_csv(raw.decode("utf-8"))
        flows, summary = build_series(self.grid, table, coverage=[(t, t + 1)])
        self.series = self.series.appended(t, flows[t])
        keep_from = self.series.end_index - self.tail
        if self.series.first_index < keep_from:
            self.series = self.series.window(keep_from, self.series.end_index)
        ms["convert"] = (time.perf_counter() - t0) * 1e3
        if summary.n_uncovered:
            log.info("interval %d: %d points outside the batch interval ignored", t, summary.n_uncovered)

        t0 = time.perf_counter()
        try:
            records = predict_multi(self.model, self.series, self._externals(t + 1), self.horizon, now=now)
        except (InsufficientHistory, ValueError) as e:
            ms["predict"] = (time.perf_counter() - t0) * 1e3
            self.ticks += 1
            self._publish()
            return TickReport(t, "skipped", ms, (t,), message=str(e))
        ms["predict"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        ttl = int(self.retention * self.grid.interval_seconds)
        try:
            for rec in records:
                self._retry(self.cache.set, pred_key(rec.t), encode_forecast(self.grid, rec), ttl)
        except kv.CacheError as e:
            ms["push"] = (time.perf_counter() - t0) * 1e3
            return TickReport(t, "error", ms, (t,), message=f"push failed: {e}")
        for rec in records:
            self.forecasts.put(rec)
        self.forecasts.evict(t + 1)
        ms["push"] = (time.perf_counter() - t0) * 1e3

        self.ticks += 1
        self._publish(records)
        return TickReport(t, "ok", ms, (t,), tuple(r.t for r in records))

    def _publish(self, records=None):
        idx = tuple(int(i) for i in self.series.indices())
        recs = tuple(records) if records is not None else (self._snapshot.forecasts if self._snapshot else ())
        self._snapshot = Snapshot(self.grid, idx, _frozen(self.series.stacked()), recs, self.ticks, self.horizon)


def pipeline_tick(pipeline: Pipeline, now: float) -> TickReport:
    return pipeline.tick(now)


def run_loop(pipeline: Pipeline, tick_seconds: float, stop: threading.Event, clock=time.time) -> None:
    """Tick every ``tick_seconds`` until ``stop`` is set."""
    while not stop.is_set():
        report = pipeline.tick(clock())
        log.info("tick %s %s %s", report.interval, report.status,
                 " ".join(f"{k}={v:.1f}ms" for k, v in report.stages_ms.items()))
        stop.wait(tick_seconds)


def batches_by_interval(text: str, grid: GridSpec) -> dict[int, bytes]:
    """Split trajectory CSV text into per-interval CSV batches.

    Rows keep their original text; rows whose timestamp cannot be read are
    dropped here and left for the converter's malformed-row accounting.
    """
    header = ",".join(CSV_HEADER)
    rows: dict[int, list[str]] = {}
    for line in text.splitlines():
        if not line.strip() or line.strip() == header:
            continue
        parts = next(csv.reader([line]), [])
        try:
            ts = int(parts[1])
        except (IndexError, ValueError):
            continue
        if ts < grid.epoch_start:
            continue
        rows.setdefault(grid.interval_of(ts), []).append(line)
    return {t: ("\n".join([header] + lines) + "\n").encode() for t, lines in sorted(rows.items())}


def feed_batches(cache, batches: dict[int, bytes], ttl: int | None = None) -> None:
    for t, data in batches.items():
        cache.set(traj_key(t), data, ttl)
