"""Single- and multi-step forecasting with prediction feedback, and a
retention-bounded forecast cache."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stresnet
from .externals import ExternalRecord, ExternalSchema, calendar_record, encode_record
from .flowgrid import FlowSeries, GridSpec, encode_flw
from .stresnet import Inputs, ModelConfig
from .trainer import Checkpoint, NormStats, minmax_apply, minmax_invert

DEFAULT_RETENTION = 96  # two days of 30-minute intervals


class InsufficientHistory(ValueError):
    def __init__(self, missing: int):
        super().__init__(f"history is missing interval {missing}")
        self.missing = missing


@dataclass(frozen=True)
class ForecastRecord:
    t: int
    tensor: np.ndarray          # raw scale, unclamped
    produced_at: float
    checkpoint_id: str = ""

    def export_tensor(self) -> np.ndarray:
        """Nonnegative integer counts for FLW1 export."""
        return np.rint(np.maximum(self.tensor, 0.0)).astype(np.int64)


@dataclass
class Model:
    params: dict[str, np.ndarray]
    config: ModelConfig
    stats: NormStats
    checkpoint_id: str = ""

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Model":
        return cls(ckpt.params, ckpt.config, ckpt.stats, ckpt.checkpoint_id)


class _History:
    """Normalized observations plus rolled-out predictions, with an access log."""

    def __init__(self, series: FlowSeries, stats: NormStats):
        self.series = series
        self.stats = stats
        self.predicted: dict[int, np.ndarray] = {}
        self.accessed: list[int] = []

    def get(self, t: int) -> np.ndarray:
        self.accessed.append(t)
        if t in self.predicted:
            return self.predicted[t]
        x = self.series.get(t)
        if x is None:
            raise InsufficientHistory(t)
        return minmax_apply(x, self.stats)


def _window(cfg: ModelConfig, get, t: int, branch: str) -> np.ndarray | None:
    offs = cfg.offsets(branch)
    if not offs:
        return None
    return np.concatenate([get(t - o) for o in offs], axis=0)[None]


def required_indices(cfg: ModelConfig, n: int, k: int = 1) -> list[int]:
    """Observed intervals a ``k``-step rollout starting at ``n`` needs, earliest first."""
    need = {n + s - o for s in range(k) for b in stresnet.BRANCHES for o in cfg.offsets(b)}
    return sorted(t for t in need if t < n)


def predict_multi(model: Model, history: FlowSeries, externals, k: int,
                  now: float | None = None, access_log: list | None = None) -> list[ForecastRecord]:
    """Forecast intervals ``n .. n+k-1`` where ``n`` is the end of ``history``.

    Each prediction is fed back (in normalized space) as an observation for
    later steps.  ``externals`` supplies the encoded vector of each forecast
    step, either as a sequence of length ``k`` or a mapping interval -> vector.
    """
    if k < 1:
        raise ValueError("horizon k must be >= 1")
    cfg = model.config
    n = history.end_index
    missing = [t for t in required_indices(cfg, n, k) if t not in history]
    if missing:
        raise InsufficientHistory(missing[0])
    hist = _History(history, model.stats)
    produced = time.time() if now is None else now
    out = []
    for step in range(k):
        t = n + step
        ext = None
        if cfg.ext_dim > 0:
            ext = np.asarray(externals[t] if isinstance(externals, dict) else externals[step])[None]
        inputs = Inputs(_window(cfg, hist.get, t, "c"), _window(cfg, hist.get, t, "p"),
                        _window(cfg, hist.get, t, "q"), ext)
        pred = stresnet.forward(model.params, cfg, inputs)[0]
        hist.predicted[t] = pred
        out.append(ForecastRecord(t, minmax_invert(pred, model.stats), produced, model.checkpoint_id))
    if access_log is not None:
        access_log.extend(hist.accessed)
    return out


def future_externals(policy: str, n: int, k: int, grid: GridSpec, schema: ExternalSchema,
                     known: list[ExternalRecord]) -> list[np.ndarray]:
    """Encoded external vectors for intervals ``n .. n+k-1``.

    ``forecast``: ``known`` must contain a record for every step (e.g. weather
    forecasts).  ``hold-last``: the weather of the latest record before ``n``
    is repeated while calendar fields follow each interval's own date.
    """
    by_t = {r.interval: r for r in known}
    if policy == "forecast":
        missing = [t for t in range(n, n + k) if t not in by_t]
        if missing:
            raise ValueError(f"no supplied external record for interval {missing[0]}")
        return [encode_record(by_t[t], schema) for t in range(n, n + k)]
    if policy == "hold-last":
        past = [r for r in known if r.interval < n]
        if not past:
            raise ValueError(f"no observed external record before interval {n}")
        last = max(past, key=lambda r: r.interval)
        return [encode_record(calendar_record(t, grid.interval_start(t), schema, last), schema)
                for t in range(n, n + k)]
    raise ValueError(f"unknown externals policy {policy!r}")


class ForecastCache:
    """Forecast records by interval, dropped once ``retention`` intervals old.

    A record for interval ``t`` is evicted by ``evict(now)`` when
    ``now - t >= retention``; eviction never moves backwards in time.
    """

    def __init__(self, retention: int = DEFAULT_RETENTION):
        self.retention = retention
        self._records: dict[int, ForecastRecord] = {}
        self._horizon = None
        self._lock = threading.Lock()

    def put(self, record: ForecastRecord, retention: int | None = None) -> None:
        with self._lock:
            if retention is not None:
                self.retention = retention
            if self._horizon is not None and self._horizon - record.t >= self.retention:
                return
            self._records[record.t] = record

    def get(self, t: int) -> ForecastRecord | None:
        with self._lock:
            return self._records.get(t)

    def evict(self, now: int) -> int:
        with self._lock:
            if self._horizon is not None and now < self._horizon:
                now = self._horizon
            self._horizon = now
            stale = [t for t in self._records if now - t >= self.retention]
            for t in stale:
                del self._records[t]
            return len(stale)

    def __len__(self) -> int:
        return len(self._records)

    def intervals(self) -> list[int]:
        with self._lock:
            return sorted(self._records)


def encode_forecast(grid: GridSpec, record: ForecastRecord) -> bytes:
    """FLW1 block holding one forecast tensor."""
    return encode_flw(grid, record.t, record.export_tensor())


def export_forecasts(records: list[ForecastRecord], grid: GridSpec, path, horizon: int | None = None) -> None:
    """Write predicted tensors as FLW1 plus a ``.json`` sidecar."""
    if not records:
        raise ValueError("nothing to export")
    path = Path(path)
    blocks = np.stack([r.export_tensor() for r in records])
    path.write_bytes(encode_flw(grid, records[0].t, blocks))
    sidecar = {
        "produced_at": records[0].produced_at,
        "horizon": horizon if horizon is not None else len(records),
        "first_interval": records[0].t,
        "checkpoint_id": records[0].checkpoint_id,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
