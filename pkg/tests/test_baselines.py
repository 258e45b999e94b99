import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cityflow.evaluation import (
    ExperimentSpec, export_fusion_maps, fusion_weight_stats, ha_predict, ha_predict_many,
    persistence_predict, rmse, run_experiment,
)
from cityflow.flowgrid import FlowSeries, GridSpec
from cityflow.heatmap import read_ppm

DAY = 86400
MONDAY = 1_420_416_000  # 2015-01-05 00:00 UTC


def hourly(values, start=0, epoch=MONDAY):
    grid = GridSpec(0.0, 1.0, 0.0, 1.0, 1, 1, 3600, epoch)
    arr = np.asarray(values, dtype=np.int64).reshape(-1, 1, 1, 1)
    return FlowSeries(grid, [(start, np.repeat(arr, 2, axis=1))])


def brute_ha(series, t):
    """Average of all earlier intervals on the same weekday and clock time."""
    grid = series.grid
    key = lambda s: (((grid.interval_start(s) // DAY) + 3) % 7, grid.interval_start(s) % DAY)
    matches = [series[s] for s in series.indices() if s < t and key(s) == key(t)]
    return sum(m.astype(np.float64) for m in matches) / len(matches)


# --- HA ----------------------------------------------------------------------

def test_ha_constant_series():
    s = hourly([5] * (24 * 15))
    assert np.array_equal(ha_predict(s, 24 * 14 + 3), np.full((2, 1, 1), 5.0))


def test_ha_two_tuesdays_average():
    vals = np.zeros(24 * 15, dtype=np.int64)
    vals[24 * 1 + 9] = 2    # Tuesday 09:00
    vals[24 * 8 + 9] = 4    # next Tuesday 09:00
    s = hourly(list(vals) + [0] * 24)
    assert ha_predict(s, 24 * 15 + 9).tolist() == [[[3.0]], [[3.0]]]


def test_ha_ignores_other_weekdays():
    vals = np.arange(24 * 15) % 17
    base = ha_predict(hourly(vals), 24 * 8 + 9)
    changed = vals.copy()
    changed[24 * 2 + 9] += 100  # a Wednesday
    changed[24 * 1 + 10] += 100  # Tuesday, other hour
    assert np.array_equal(ha_predict(hourly(changed), 24 * 8 + 9), base)


def test_ha_uses_only_the_past():
    vals = np.arange(24 * 22) % 13
    base = ha_predict(hourly(vals), 24 * 14 + 5)
    changed = vals.copy()
    changed[24 * 14 + 5:] += 50
    assert np.array_equal(ha_predict(hourly(changed), 24 * 14 + 5), base)


def test_ha_without_history_raises():
    with pytest.raises(LookupError):
        ha_predict(hourly([1] * 24), 10)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=24 * 7 + 1, max_size=24 * 20), st.integers(0, 7 * 24 - 1))
def test_ha_matches_brute_force(values, offset):
    s = hourly(values, start=offset)
    ts = [t for t in s.indices() if t - 7 * 24 >= s.first_index]
    fast = ha_predict_many(s, ts)
    for k, t in enumerate(ts):
        ref = brute_ha(s, t)
        assert np.array_equal(ha_predict(s, t), ref)
        assert np.array_equal(fast[k], ref)


def test_ha_exact_on_noise_free_weekly_series():
    week = np.random.default_rng(0).integers(0, 100, 24 * 7)
    s = hourly(np.tile(week, 4))
    ts = list(range(24 * 21, 24 * 28))
    assert rmse(ha_predict_many(s, ts), np.stack([s[t] for t in ts])) == 0.0


def test_ha_time_of_day_variant():
    vals = np.zeros(24 * 3)
    vals[9], vals[24 + 9] = 2, 6
    assert ha_predict(hourly(vals), 48 + 9, time_of_day_only=True).ravel().tolist() == [4.0, 4.0]


# --- persistence and rmse ----------------------------------------------------

def test_persistence():
    s = hourly([1, 2, 3])
    assert np.array_equal(persistence_predict(s, 2), s[1])
    with pytest.raises(LookupError):
        persistence_predict(s, 0)
    c = hourly([4] * 10)
    assert rmse(np.stack([persistence_predict(c, t) for t in range(1, 10)]),
                np.stack([c[t] for t in range(1, 10)])) == 0.0


def test_rmse_cases():
    a = np.random.default_rng(1).normal(size=(5, 2, 3, 3))
    assert rmse(a, a) == 0.0
    assert rmse(a + 2.5, a) == pytest.approx(2.5, abs=1e-12)
    b = np.random.default_rng(2).normal(size=a.shape)
    ref = (sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size) ** 0.5
    assert abs(rmse(a, b) - ref) < 1e-12
    with pytest.raises(ValueError):
        rmse(a, a[:2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_rmse_invariant_to_order(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(4, 2, 2, 2)), r.normal(size=(4, 2, 2, 2))
    perm = r.permutation(4)
    assert rmse(a[perm], b[perm]) == pytest.approx(rmse(a, b), rel=1e-12)
    assert rmse(a.reshape(-1), b.reshape(-1)) == pytest.approx(rmse(a, b), rel=1e-12)


# --- fusion weights ----------------------------------------------------------

def test_fusion_stats_cases(tmp_path):
    ones = np.ones((2, 4, 4))
    st_ = fusion_weight_stats(ones, ones, np.zeros((2, 4, 4)))
    assert st_.fraction_below == {"closeness": 0.0, "period": 0.0, "trend": 1.0}
    r = np.random.default_rng(4)
    w = r.uniform(-1, 1, (2, 4, 4))
    got = fusion_weight_stats(w, None, None, threshold=0.3).fraction_below
    count = sum(1 for v in w.ravel() if abs(v) < 0.3)
    assert got == {"closeness": count / w.size}
    paths = export_fusion_maps(st_, tmp_path)
    assert len(paths) == 6
    img = read_ppm(paths[0].read_bytes())
    assert img.shape == (4, 4, 3)


# --- experiment runner -------------------------------------------------------

SMALL = {"synth": {"grid": {"lon_min": 0.0, "lon_max": 0.08, "lat_min": 0.0, "lat_max": 0.08,
                            "rows": 8, "cols": 8, "interval_seconds": 1800, "epoch_start": MONDAY},
                   "n_agents": 300, "n_days": 9, "seed": 2}}
TINY_MODEL = {"len_closeness": 2, "len_period": 1, "len_trend": 1, "n_units": 1, "filters": 2}
TINY_HYPER = {"max_epochs": 1, "finetune_epochs": 0, "batch_size": 64}


def test_experiment_single_model_row_and_duplicates(tmp_path):
    spec = {"name": "dup", "dataset": SMALL, "test_days": 1, "seeds": [3], "baselines": [],
            "models": [{"name": "a", "model": TINY_MODEL, "hyper": TINY_HYPER}]}
    report = run_experiment(spec)
    assert len(report.rows) == 1
    spec["models"].append({"name": "b", "model": TINY_MODEL, "hyper": TINY_HYPER})
    report = run_experiment(spec, out_dir=tmp_path, figures=True)
    assert report.rmse_of("a") == report.rmse_of("b")
    assert (tmp_path / "report.csv").exists() and (tmp_path / "rmse.png").exists()
    data = json.loads((tmp_path / "report.json").read_text())
    assert [r["model"] for r in data["rows"]] == ["a", "b"]


def test_experiment_ha_row_matches_manual_loop():
    from cityflow.evaluation import load_dataset
    spec = {"dataset": SMALL, "test_days": 1, "baselines": ["ha", "persistence"]}
    report = run_experiment(spec)
    flows = load_dataset(SMALL).flows
    test_start = flows.end_index - 48
    ts = [t for t in flows.indices() if t >= test_start]
    preds = np.stack([brute_ha(flows, t) for t in ts])
    truth = np.stack([flows[t] for t in ts])
    assert report.rmse_of("HA") == rmse(preds, truth)
    assert report.rmse_of("persistence") == rmse(np.stack([flows[t - 1] for t in ts]), truth)


def test_experiment_multi_step_rows():
    spec = {"dataset": SMALL, "test_days": 1, "baselines": [], "multi_step": 3, "multi_step_stride": 12,
            "models": [{"name": "m", "model": TINY_MODEL, "hyper": TINY_HYPER}]}
    row = run_experiment(spec).rows[0]
    assert len(row.per_step_rmse) == 3 and all(v >= 0 for v in row.per_step_rmse)
    assert set(row.fusion_fraction_below) == {"closeness", "period", "trend"}


def test_experiment_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"baselines": ["arima"]})
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"baselines": [], "models": []})
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"test_days": 0})
