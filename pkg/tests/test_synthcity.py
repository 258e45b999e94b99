import numpy as np
import pytest

from cityflow.flowgrid import GridSpec
from cityflow.synthcity import (
    SplitMix64, SynthConfig, WeatherEvent, check_csv_against, default_regions, generate, verify_consistency,
)

MONDAY = 1_420_416_000
SMALL_GRID = GridSpec(0.0, 0.08, 0.0, 0.08, 8, 8, 1800, MONDAY)


def small(**kw):
    base = dict(grid=SMALL_GRID, n_agents=400, n_days=8, seed=3)
    base.update(kw)
    return SynthConfig(**base)


# --- PRNG --------------------------------------------------------------------

def test_splitmix64_reference_vectors():
    rng = SplitMix64(1234567)
    assert [rng.next_u64() for _ in range(5)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423,
        4593380528125082431, 16408922859458223821]


def test_splitmix64_block_matches_scalar():
    a, b = SplitMix64(42), SplitMix64(42)
    block = a.u64_block(100).tolist()
    assert block == [b.next_u64() for _ in range(100)]
    assert a.state == b.state


def test_splitmix64_uniform_and_integers_ranges():
    u = SplitMix64(1).uniform(10_000)
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.02
    k = SplitMix64(1).integers(10_000, 7)
    assert set(k.tolist()) == set(range(7))


# --- config ------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(period_intervals=1)
    with pytest.raises(ValueError):
        small(period_intervals=24)  # does not match 30-minute intervals
    with pytest.raises(ValueError):
        small(weather_events=[WeatherEvent(0, 2, 1.5)])
    with pytest.raises(ValueError):
        small(day_volatility=0.6)


def test_default_regions_partition_the_grid():
    homes, offices, malls = default_regions(GridSpec(0, 1, 0, 1, 16, 16, 1800))
    assert not set(homes) & set(offices) and not set(malls) & set(offices)
    assert len(homes) + len(offices) + len(malls) == 256


# --- generation --------------------------------------------------------------

def test_no_agents_no_flows():
    out = generate(small(n_agents=0))
    assert len(out.points) == 0 and not out.flows.stacked().any()
    assert len(out.flows) == 8 * 48


def test_same_seed_same_bytes():
    a, b = generate(small()), generate(small())
    assert a.csv_text() == b.csv_text()
    assert np.array_equal(a.flows.stacked(), b.flows.stacked())
    assert generate(small(seed=4)).csv_text() != a.csv_text()


def test_consecutive_points_are_adjacent_cells():
    out = generate(small(n_days=3))
    pts = out.points
    cells = None
    from cityflow.flowgrid import locate_many
    cells = locate_many(SMALL_GRID, pts.lon, pts.lat)
    assert (cells >= 0).all()
    order = np.lexsort((pts.timestamp, pts.object_code))
    obj, c = pts.object_code[order], cells[order]
    same = obj[1:] == obj[:-1]
    di = np.abs(c[1:] // 8 - c[:-1] // 8)
    dj = np.abs(c[1:] % 8 - c[:-1] % 8)
    assert (di + dj)[same].max() <= 1


def test_office_inflow_has_daily_period():
    out = generate(small(n_agents=600, n_days=14, noise=0.0, day_volatility=0.0, trend_growth=0.0,
                         weather_events=[]))
    _, offices, _ = default_regions(SMALL_GRID)
    x = out.flows.stacked()[:, 0]
    series = sum(x[:, i, j] for i, j in offices).astype(float)
    series -= series.mean()
    ac = lambda lag: float(np.dot(series[lag:], series[:-lag]) / np.dot(series, series))
    assert ac(48) > ac(24)
    assert ac(48) > 0.3


def test_weather_suppresses_flow():
    p = 48
    events = [WeatherEvent(d * p + 14, 6, 0.3) for d in range(7, 12)]  # 07:00-10:00, week two
    out = generate(small(n_agents=800, n_days=14, noise=0.0, day_volatility=0.0, weather_events=events))
    totals = out.flows.stacked().sum(axis=(1, 2, 3))
    pairs = [(t, t - 7 * p) for e in events for t in range(e.start, e.start + e.length)]
    assert len(pairs) >= 20
    event = np.mean([totals[a] for a, _ in pairs])
    clear = np.mean([totals[b] for _, b in pairs])
    assert event < clear


def test_weekly_trend_grows_commuting():
    out = generate(small(n_agents=1500, n_days=21, noise=0.0, day_volatility=0.0, trend_growth=0.3,
                         weather_events=[]))
    weekly = out.flows.stacked().reshape(3, 7 * 48, -1).sum(axis=(1, 2))
    assert weekly[0] < weekly[1] < weekly[2]


def test_externals_cover_every_interval():
    out = generate(small(n_days=2))
    ext = out.externals()
    assert sorted(ext) == list(range(96)) and all(len(v) == out.schema.dim for v in ext.values())


# --- consistency -------------------------------------------------------------

def test_default_config_is_consistent():
    rep = verify_consistency(SynthConfig(n_days=7))
    assert rep.equal and rep.n_malformed == 0 and rep.n_points > 0


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_random_configs_are_consistent(seed):
    r = np.random.default_rng(seed)
    cfg = SynthConfig(grid=GridSpec(116.0, 116.1, 39.9, 40.0, int(r.integers(6, 13)), int(r.integers(6, 13)),
                                    1800, MONDAY),
                      n_agents=int(r.integers(50, 400)), n_days=int(r.integers(2, 5)), seed=seed,
                      noise=float(r.uniform(0, 0.3)))
    assert verify_consistency(cfg).equal


def test_perturbed_csv_is_flagged():
    out = generate(small(n_days=2))
    lines = out.csv_text().splitlines()
    k = len(lines) // 2
    oid, ts, lon, lat = lines[k].split(",")
    lines[k] = ",".join([oid, ts, "0.0799999", "0.0799999"])
    rep = check_csv_against("\n".join(lines) + "\n", out.flows)
    t = (int(ts) - MONDAY) // 1800
    assert not rep.equal and t in rep.mismatched_intervals
