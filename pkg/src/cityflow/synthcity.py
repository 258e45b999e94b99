"""Deterministic synthetic commuter city.

Agents live in residential cells, work in office districts and visit malls
on days off.  Each agent keeps habitual departure and return times and a
habitual route, and moves across the grid at a finite speed, so a commute
spans several intervals.  Bad weather cancels departures and errands, a
persistent day-level activity regime scales how many people go out, and the
commuting probability grows week over week.  A share of agents run short
errands (round trips to a neighbouring cell) at random times.

All randomness comes from :class:`SplitMix64` so that the emitted CSV is
byte-identical for a given configuration on any platform.  Draws are taken
in blocks in a fixed order.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .externals import ExternalRecord, ExternalSchema, calendar_of, encode_records
from .flowgrid import FlowSeries, GridSpec, PointTable, build_series, parse_trajectory_csv

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1

COORD_SCALE = 10_000_000  # coordinates are emitted with 7 decimals


class SplitMix64:
    """SplitMix64 (Steele, Lea, Flood 2014) with 64-bit state.

    ``state += GAMMA; z = state; z = (z ^ z>>30) * MUL1; z = (z ^ z>>27) * MUL2;
    return z ^ z>>31`` (all mod 2**64).  Output ``i`` only depends on
    ``seed + (i+1) * GAMMA``, so blocks are generated vectorized.

    Test vectors (seed 1234567): 6457827717110365317, 3203168211198807973,
    9817491932198370423, 4593380528125082431, 16408922859458223821.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + SPLITMIX_GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * SPLITMIX_MUL1) & _MASK64
        z = ((z ^ (z >> 27)) * SPLITMIX_MUL2) & _MASK64
        return z ^ (z >> 31)

    def u64_block(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(SPLITMIX_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_MUL1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_MUL2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * SPLITMIX_GAMMA) & _MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """Floats in [0, 1) from the top 53 bits."""
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)


@dataclass
class WeatherEvent:
    start: int          # interval index
    length: int         # intervals
    suppression: float  # multiplies every movement probability


@dataclass
class SynthConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(116.0, 116.16, 39.8, 39.96, 16, 16, 1800,
                                                             1_420_416_000))  # Mon 2015-01-05
    n_agents: int = 8000
    n_days: int = 35
    period_intervals: int = 48              # intervals per simulated day
    trend_cycle: int = 7                    # days per trend cycle (one week)
    trend_growth: float = 0.05              # commute probability growth per cycle
    base_commute: float = 0.7               # working-day commute probability in week 0
    leisure: float = 0.3                    # off-day mall trip probability in week 0
    home_cells: list[tuple[int, int]] | None = None
    office_cells: list[tuple[int, int]] | None = None
    mall_cells: list[tuple[int, int]] | None = None
    morning_hours: tuple[int, ...] = (7, 8, 9)      # habitual departure hour (plus a habitual minute)
    evening_hours: tuple[int, ...] = (17, 18, 19)   # habitual return hour (plus a habitual minute)
    jitter_minutes: float = 15.0            # daily departure/return jitter, uniform +-
    cell_minutes: float = 8.0               # time to cross one cell
    weather_events: list[WeatherEvent] | None = None   # None: drawn from the seed
    holidays: list[int] = field(default_factory=list)   # day indices
    noise: float = 0.15                     # errand probability per agent-hour (06-22h, a quarter at night)
    day_volatility: float = 0.4             # std of the daily activity factor around 1
    day_persistence: float = 0.8            # AR(1) coefficient of the activity factor across days
    seed: int = 7

    def __post_init__(self):
        if self.period_intervals < 2:
            raise ValueError("period_intervals must be >= 2")
        if self.period_intervals * self.grid.interval_seconds != 86400:
            raise ValueError("period_intervals * grid.interval_seconds must be one day (86400 s)")
        for ev in self.weather_events or ():
            if not 0.0 <= ev.suppression <= 1.0:
                raise ValueError("weather suppression factor must be in [0, 1]")
        if not 0.0 <= self.day_volatility < 0.5:
            raise ValueError("day_volatility must be in [0, 0.5)")
        if not 0.0 <= self.day_persistence < 1.0:
            raise ValueError("day_persistence must be in [0, 1)")
        if self.n_agents < 0 or self.n_days < 1:
            raise ValueError("n_agents >= 0 and n_days >= 1 required")
        if not 0.0 < self.cell_minutes <= 60.0 or not 0.0 <= self.jitter_minutes < 60.0:
            raise ValueError("cell_minutes must be in (0, 60] and jitter_minutes in [0, 60)")

    @property
    def n_intervals(self) -> int:
        return self.n_days * self.period_intervals


@dataclass
class SynthOutput:
    points: PointTable
    lon_q: np.ndarray       # coordinates in units of 1e-7 degree
    lat_q: np.ndarray
    records: list[ExternalRecord]
    schema: ExternalSchema
    flows: FlowSeries
    config: SynthConfig

    def csv_text(self) -> str:
        return format_points_csv(self.points.object_id, self.points.timestamp, self.lon_q, self.lat_q)

    def externals(self) -> dict[int, np.ndarray]:
        return encode_records(self.records, self.schema)


def default_regions(grid: GridSpec):
    """(homes, offices, malls) as (i, j) lists: five 4x4 office districts (centre
    and quadrant centres), four 2x2 malls between them, every other cell residential."""
    r, c = grid.rows, grid.cols
    anchors = [(r // 2, c // 2), (r // 4, c // 4), (r // 4, 3 * c // 4),
               (3 * r // 4, c // 4), (3 * r // 4, 3 * c // 4)]
    offices = [(i + di, j + dj) for i, j in anchors for di in range(-2, 2) for dj in range(-2, 2)]
    malls = [(i + di, j + dj) for i, j in [(r // 2, c // 8), (r // 2, c - 1 - c // 8), (r // 8, c // 2),
                                           (r - 1 - r // 8, c // 2)] for di in (-1, 0) for dj in (-1, 0)]
    dedup = lambda cells: sorted(set((min(max(i, 0), r - 1), min(max(j, 0), c - 1)) for i, j in cells))
    offices = dedup(offices)
    malls = [m for m in dedup(malls) if m not in offices]
    taken = set(offices) | set(malls)
    homes = [(i, j) for i in range(r) for j in range(c) if (i, j) not in taken]
    # small grids: office blocks can swallow every mall cell
    return homes or [(0, 0)], offices, malls or offices


def _weather_schedule(cfg: SynthConfig, rng: SplitMix64) -> list[WeatherEvent]:
    """About a third of days get one event of 2-6 hours, suppression 0.15-0.5."""
    if cfg.weather_events is not None:
        return list(cfg.weather_events)
    events = []
    p = cfg.period_intervals
    per_hour = p / 24
    draws = rng.uniform(4 * cfg.n_days)
    for d in range(cfg.n_days):
        if draws[4 * d] < 0.35:
            start = d * p + int(draws[4 * d + 1] * p)
            length = max(1, round((2 + int(draws[4 * d + 2] * 5)) * per_hour))
            events.append(WeatherEvent(start, length, 0.15 + 0.35 * float(draws[4 * d + 3])))
    return events


def _paths(src: np.ndarray, dst: np.ndarray, cols: int, row_first: np.ndarray):
    """Cell sequences of Manhattan routes; returns (trip_id, step, cell) arrays."""
    si, sj = src // cols, src % cols
    di, dj = dst // cols, dst % cols
    ni, nj = np.abs(di - si), np.abs(dj - sj)
    lengths = 1 + ni + nj
    trip = np.repeat(np.arange(len(src)), lengths)
    starts = np.cumsum(lengths) - lengths
    step = np.arange(lengths.sum()) - np.repeat(starts, lengths)
    ni_r, nj_r = np.repeat(ni, lengths), np.repeat(nj, lengths)
    si_r, sj_r = np.repeat(si, lengths), np.repeat(sj, lengths)
    sgn_i, sgn_j = np.repeat(np.sign(di - si), lengths), np.repeat(np.sign(dj - sj), lengths)
    rf = np.repeat(row_first, lengths)
    # row-first: rows advance for the first ni steps, then columns
    ri = np.where(rf, np.minimum(step, ni_r), np.maximum(step - nj_r, 0))
    rj = np.where(rf, np.maximum(step - ni_r, 0), np.minimum(step, nj_r))
    cell = (si_r + sgn_i * ri) * cols + (sj_r + sgn_j * rj)
    return trip, step, cell, lengths


def generate(cfg: SynthConfig) -> SynthOutput:
    grid = cfg.grid
    p = cfg.period_intervals
    secs = grid.interval_seconds
    horizon_end = grid.interval_start(cfg.n_intervals)
    cell_secs = max(int(round(cfg.cell_minutes * 60)), 1)
    jitter = int(round(cfg.jitter_minutes * 60))
    rng = SplitMix64(cfg.seed)
    homes_l, offices_l, malls_l = default_regions(grid)
    as_flat = lambda cells: np.array([i * grid.cols + j for i, j in cells], dtype=np.int64)
    homes = as_flat(cfg.home_cells or homes_l)
    offices = as_flat(cfg.office_cells or offices_l)
    malls = as_flat(cfg.mall_cells or malls_l)
    n = cfg.n_agents

    # habits, fixed per agent
    home = homes[rng.integers(n, len(homes))]
    office = offices[rng.integers(n, len(offices))]
    mall = malls[rng.integers(n, len(malls))]
    morning = np.asarray(cfg.morning_hours)[rng.integers(n, len(cfg.morning_hours))] * 3600 \
        + rng.integers(n, 3600)
    evening = np.asarray(cfg.evening_hours)[rng.integers(n, len(cfg.evening_hours))] * 3600 \
        + rng.integers(n, 3600)
    row_first = rng.uniform(n) < 0.5
    events = _weather_schedule(cfg, rng)
    suppression = np.ones(cfg.n_intervals)
    for ev in events:
        lo, hi = max(ev.start, 0), min(ev.start + ev.length, cfg.n_intervals)
        suppression[lo:hi] = np.minimum(suppression[lo:hi], ev.suppression)

    away = np.zeros(n, dtype=bool)          # at (or heading to) today's destination
    going_today = np.zeros(n, dtype=bool)
    dest = office.copy()
    depart_at = np.full(n, -1, dtype=np.int64)
    return_at = np.full(n, -1, dtype=np.int64)
    busy_until = np.full(n, -1, dtype=np.int64)
    activity, regime = 1.0, 0.0
    ids, ts, cells = [], [], []
    holidays = set(cfg.holidays)
    step_i = np.array([1, -1, 0, 0])
    step_j = np.array([0, 0, 1, -1])

    def emit(who, start, src, dst, shape):
        trip, step, cell, lengths = _paths(src, dst, grid.cols, shape)
        ids.append(who[trip])
        ts.append(start[trip] + step * cell_secs)
        cells.append(cell)
        busy_until[who] = start + (lengths - 1) * cell_secs

    for t in range(cfg.n_intervals):
        day, slot = divmod(t, p)
        start = grid.interval_start(t)
        end = start + secs
        hour = slot * 24 // p
        _, weekend, _ = calendar_of(start)
        off_day = weekend or day in holidays
        if slot == 0:
            # unit-variance AR(1) regime; innovations uniform on [-sqrt(3), sqrt(3)]
            shock = np.sqrt(3.0) * (2.0 * rng.uniform(1)[0] - 1.0)
            regime = cfg.day_persistence * regime + np.sqrt(1.0 - cfg.day_persistence ** 2) * shock
            activity = max(1.0 + cfg.day_volatility * regime, 0.1)
            growth = (1.0 + cfg.trend_growth) ** (day // cfg.trend_cycle)
            base = cfg.leisure if off_day else cfg.base_commute
            going_today = (rng.uniform(n) < min(base * growth * activity, 1.0)) & ~away
            dest = np.where(away, dest, mall if off_day else office)
            shift = 4 * 3600 if off_day else 0
            dj = rng.integers(2 * n, 2 * jitter + 1) - jitter
            depart_at = start + morning + shift + dj[0::2]
            return_at = start + evening - shift // 2 + dj[1::2]
        w = suppression[t]
        u_go, u_errand = rng.uniform(n), rng.uniform(n)

        # bad weather cancels departures; returns keep their schedule
        due = going_today & ~away & (depart_at >= start) & (depart_at < end)
        leave_home = due & (u_go < w)
        going_today &= ~due
        leave_dest = away & (return_at >= start) & (return_at < end) & (busy_until < return_at)
        out_who, back_who = np.nonzero(leave_home)[0], np.nonzero(leave_dest)[0]
        if len(out_who):
            emit(out_who, depart_at[out_who], home[out_who], dest[out_who], row_first[out_who])
            # never start the way back before arriving
            return_at[out_who] = np.maximum(return_at[out_who], busy_until[out_who] + cell_secs)
        if len(back_who):
            emit(back_who, return_at[back_who], dest[back_who], home[back_who], ~row_first[back_who])
        away = (away | leave_home) & ~leave_dest

        # errands: two-hop round trip from the current cell, for idle agents only
        rate = (cfg.noise if 6 <= hour < 22 else cfg.noise / 4) * activity * w * secs / 3600
        scheduled = (going_today & (depart_at < end + secs)) | (away & (return_at < end + secs))
        errand = (u_errand < rate) & (busy_until < start) & ~scheduled
        e_who = np.nonzero(errand)[0]
        if len(e_who):
            e_src = np.where(away[e_who], dest[e_who], home[e_who])
            e_dir = rng.integers(2 * len(e_who), 4)
            ei, ej = e_src // grid.cols, e_src % grid.cols
            i1 = np.clip(ei + step_i[e_dir[0::2]], 0, grid.rows - 1)
            j1 = np.clip(ej + step_j[e_dir[0::2]], 0, grid.cols - 1)
            i2 = np.clip(i1 + step_i[e_dir[1::2]], 0, grid.rows - 1)
            j2 = np.clip(j1 + step_j[e_dir[1::2]], 0, grid.cols - 1)
            c1, c2 = i1 * grid.cols + j1, i2 * grid.cols + j2
            e_start = start + rng.integers(len(e_who), max(secs // 2, 1))
            for k, c in enumerate((e_src, c1, c2, c1, e_src)):
                ids.append(e_who)
                ts.append(e_start + k * cell_secs)
                cells.append(c)
            busy_until[e_who] = e_start + 4 * cell_secs

    ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    ts = np.concatenate(ts) if ts else np.zeros(0, dtype=np.int64)
    cells = np.concatenate(cells) if cells else np.zeros(0, dtype=np.int64)
    keep = ts < horizon_end
    ids, ts, cells = ids[keep], ts[keep], cells[keep]
    order = np.lexsort((ids, ts))
    ids, ts, cells = ids[order], ts[order], cells[order]
    lon_q, lat_q = _cell_coords(grid, cells, rng)
    names = np.array([f"a{k}" for k in range(n)], dtype=object)
    table = PointTable.from_columns(names[ids], ts, lon_q / COORD_SCALE, lat_q / COORD_SCALE, codes=ids)

    records = _externals(cfg, suppression, rng)
    schema = ExternalSchema.fit(records, n_weather=5,
                                holidays=[calendar_of(grid.interval_start(d * p))[2] for d in cfg.holidays])
    flows, _ = build_series(grid, table, coverage=[(0, cfg.n_intervals)])
    return SynthOutput(table, lon_q, lat_q, records, schema, flows, cfg)


def _cell_coords(grid: GridSpec, cells: np.ndarray, rng: SplitMix64):
    """Integer coordinates (units of 1e-7 degree) inside the central 80% of a cell."""
    i, j = cells // grid.cols, cells % grid.cols
    lon0 = round(grid.lon_min * COORD_SCALE)
    lat0 = round(grid.lat_min * COORD_SCALE)
    dlon = (round(grid.lon_max * COORD_SCALE) - lon0) / grid.cols
    dlat = (round(grid.lat_max * COORD_SCALE) - lat0) / grid.rows
    u = rng.uniform(2 * len(cells))
    lon = lon0 + np.floor((j + 0.1 + 0.8 * u[0::2]) * dlon).astype(np.int64)
    lat = lat0 + np.floor((i + 0.1 + 0.8 * u[1::2]) * dlat).astype(np.int64)
    return lon, lat


def _externals(cfg: SynthConfig, suppression: np.ndarray, rng: SplitMix64) -> list[ExternalRecord]:
    grid, p = cfg.grid, cfg.period_intervals
    u = rng.uniform(2 * cfg.n_intervals)
    holidays = set(cfg.holidays)
    out = []
    for t in range(cfg.n_intervals):
        dow, weekend, _ = calendar_of(grid.interval_start(t))
        s = suppression[t]
        code = 0 if s >= 1.0 else (2 if s >= 0.4 else 3)
        if code == 0 and u[2 * t] < 0.3:
            code = 1  # cloudy, no effect on movement
        hour = (t % p) * 24 / p
        temp = 5.0 + 6.0 * np.sin(2 * np.pi * (hour - 9) / 24) + 0.1 * (t // p) + 2.0 * (u[2 * t + 1] - 0.5)
        wind = 2.0 + 3.0 * u[2 * t] + (4.0 if code >= 2 else 0.0)
        out.append(ExternalRecord(t, dow, weekend, (t // p) in holidays, code,
                                  round(float(temp), 3), round(float(wind), 3)))
    return out


def _format_coord(q: int) -> str:
    sign = "-" if q < 0 else ""
    q = abs(q)
    return f"{sign}{q // COORD_SCALE}.{q % COORD_SCALE:07d}"


def format_points_csv(ids, timestamps, lon_q, lat_q) -> str:
    buf = io.StringIO()
    buf.write("object_id,timestamp,lon,lat\n")
    for oid, t, x, y in zip(ids, np.asarray(timestamps).tolist(), np.asarray(lon_q).tolist(),
                            np.asarray(lat_q).tolist()):
        buf.write(f"{oid},{t},{_format_coord(x)},{_format_coord(y)}\n")
    return buf.getvalue()


@dataclass
class ConsistencyReport:
    equal: bool
    mismatched_intervals: list[int]
    n_points: int
    n_malformed: int


def check_csv_against(csv_text: str, flows: FlowSeries) -> ConsistencyReport:
    """Recount flows from CSV text and compare with ``flows`` interval by interval."""
    table = parse_trajectory_csv(csv_text)
    span = [(s, s + len(b)) for s, b in flows.segments]
    recount, summary = build_series(flows.grid, table, coverage=span)
    bad = [int(t) for t in flows.indices() if not np.array_equal(recount.get(t), flows[t])]
    return ConsistencyReport(not bad and summary.n_malformed == 0, bad, summary.n_points, summary.n_malformed)


def verify_consistency(cfg: SynthConfig) -> ConsistencyReport:
    out = generate(cfg)
    return check_csv_against(out.csv_text(), out.flows)
