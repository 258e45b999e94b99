import sys

import numpy as np
import pytest

from cityflow.flowgrid import GeoPoint, GridSpec


def random_points(rng, grid: GridSpec, n_points: int, n_objects: int, n_intervals: int,
                  outside: float = 0.1, boundary: float = 0.05):
    """Points placed well inside cells, plus some outside the box and on its max edges."""
    w = (grid.lon_max - grid.lon_min) / grid.cols
    h = (grid.lat_max - grid.lat_min) / grid.rows
    pts = []
    for _ in range(n_points):
        oid = f"o{rng.integers(n_objects)}"
        ts = grid.epoch_start + int(rng.integers(n_intervals * grid.interval_seconds))
        r = rng.random()
        if r < outside:
            lon = grid.lon_max + w * (0.5 + rng.random())
            lat = grid.lat_min + rng.random() * (grid.lat_max - grid.lat_min)
        elif r < outside + boundary:
            lon, lat = grid.lon_max, grid.lat_max
        else:
            lon = grid.lon_min + (rng.integers(grid.cols) + 0.05 + 0.9 * rng.random()) * w
            lat = grid.lat_min + (rng.integers(grid.rows) + 0.05 + 0.9 * rng.random()) * h
        pts.append(GeoPoint(oid, ts, float(lon), float(lat)))
    return pts


def in_cell(grid: GridSpec, i: int, j: int, lon: float, lat: float) -> bool:
    """Rectangle membership with the last row/column closed on the max side."""
    w = (grid.lon_max - grid.lon_min) / grid.cols
    h = (grid.lat_max - grid.lat_min) / grid.rows
    lo_x, hi_x = grid.lon_min + j * w, grid.lon_min + (j + 1) * w
    lo_y, hi_y = grid.lat_min + i * h, grid.lat_min + (i + 1) * h
    ok_x = lo_x <= lon < hi_x or (j == grid.cols - 1 and lon == grid.lon_max)
    ok_y = lo_y <= lat < hi_y or (i == grid.rows - 1 and lat == grid.lat_max)
    return ok_x and ok_y


def brute_force_flows(grid: GridSpec, points, t: int) -> np.ndarray:
    """Scan every cell against every consecutive same-object pair of interval ``t``."""
    lo = grid.epoch_start + t * grid.interval_seconds
    by_obj: dict[str, list] = {}
    for p in points:
        if lo <= p.timestamp < lo + grid.interval_seconds:
            by_obj.setdefault(p.object_id, []).append(p)
    seq = [sorted(traj, key=lambda p: p.timestamp) for traj in by_obj.values()]
    prev = [a for traj in seq for a in traj[:-1]]
    nxt = [b for traj in seq for b in traj[1:]]
    out = np.zeros((2, grid.rows, grid.cols), dtype=np.int64)
    if not prev:
        return out
    w = (grid.lon_max - grid.lon_min) / grid.cols
    h = (grid.lat_max - grid.lat_min) / grid.rows

    def member(pts, i, j):
        x = np.array([p.lon for p in pts])
        y = np.array([p.lat for p in pts])
        lo_x, lo_y = grid.lon_min + j * w, grid.lat_min + i * h
        ok_x = (x >= lo_x) & (x < lo_x + w)
        ok_y = (y >= lo_y) & (y < lo_y + h)
        if j == grid.cols - 1:
            ok_x |= x == grid.lon_max
        if i == grid.rows - 1:
            ok_y |= y == grid.lat_max
        return ok_x & ok_y

    for i in range(grid.rows):
        for j in range(grid.cols):
            a, b = member(prev, i, j), member(nxt, i, j)
            out[0, i, j] = int((b & ~a).sum())
            out[1, i, j] = int((a & ~b).sum())
    return out


@pytest.fixture
def small_grid():
    return GridSpec(0.0, 4.0, 0.0, 4.0, 4, 4, 600, 1_420_416_000)


def pipeline_scenario(n_ticks: int = 20, horizon: int = 3, seed: int = 5):
    """Feed a synthetic stream through the pipeline and the offline forecaster.

    Returns ``(pipeline, reports, pushed, offline)`` where ``pushed[k]`` and
    ``offline[k]`` are lists of FLW1 blobs for the k-th tick.
    """
    from cityflow import stresnet
    from cityflow.flowgrid import build_series, parse_trajectory_csv
    from cityflow.forecaster import Model, encode_forecast, future_externals, predict_multi
    from cityflow.kv import MemoryKV
    from cityflow.pipeline import Pipeline, batches_by_interval, feed_batches, pred_key
    from cityflow.stresnet import ModelConfig
    from cityflow.synthcity import SynthConfig, generate
    from cityflow.trainer import minmax_fit

    grid = GridSpec(0.0, 0.08, 0.0, 0.08, 8, 8, 1800, 1_420_416_000)
    out = generate(SynthConfig(grid=grid, n_agents=400, n_days=4, seed=seed))
    csv_text = out.csv_text()
    flows, _ = build_series(grid, parse_trajectory_csv(csv_text), coverage=[(0, 4 * 48)])
    cfg = ModelConfig(8, 8, len_closeness=3, len_period=1, len_trend=0, period=48, trend=336,
                      n_units=1, filters=4, ext_dim=out.schema.dim)
    params = stresnet.init_params(cfg, seed)
    model = Model(params, cfg, minmax_fit(flows.window(0, 144)), "scenario")

    start = 144
    cache = MemoryKV()
    feed_batches(cache, {t: b for t, b in batches_by_interval(csv_text, grid).items()
                         if start <= t < start + n_ticks})
    pipe = Pipeline(grid, model, cache, flows.window(0, start), horizon=horizon,
                    external_records=out.records, schema=out.schema)
    reports, pushed, offline = [], [], []
    for t in range(start, start + n_ticks):
        now = grid.interval_start(t + 1) + 7
        reports.append(pipe.tick(now))
        pushed.append([cache.get(pred_key(t + 1 + s)) for s in range(horizon)])
        ext = future_externals("hold-last", t + 1, horizon, grid, out.schema, out.records)
        recs = predict_multi(model, flows.window(0, t + 1), ext, horizon, now=now)
        offline.append([encode_forecast(grid, r) for r in recs])
    return pipe, reports, pushed, offline


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
