"""Grid partitioning and inflow/outflow counting from GPS points.

A city bounding box is cut into ``rows x cols`` cells (row 0 at ``lat_min``,
column 0 at ``lon_min``) and time is cut into intervals of ``interval_seconds``
starting at ``epoch_start``.  For every interval each object's points form one
trajectory; a cell gains one inflow when a trajectory steps into it from
anywhere else (another cell or outside the box) and one outflow when a
trajectory steps out of it.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

INFLOW = 0
OUTFLOW = 1

FLW_MAGIC = b"FLW1"
_FLW_HEADER = struct.Struct("<4sIIqIIQ")


class GeoPoint(NamedTuple):
    object_id: str
    timestamp: int
    lon: float
    lat: float


@dataclass(frozen=True)
class GridSpec:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    rows: int
    cols: int
    interval_seconds: int
    epoch_start: int = 0

    def __post_init__(self):
        if not self.lon_min < self.lon_max:
            raise ValueError(f"lon_min {self.lon_min} must be < lon_max {self.lon_max}")
        if not self.lat_min < self.lat_max:
            raise ValueError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.interval_seconds <= 0:
            raise ValueError("interval_seconds must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, self.rows, self.cols)

    def interval_of(self, timestamp) -> int:
        return int((timestamp - self.epoch_start) // self.interval_seconds)

    def interval_start(self, t: int) -> int:
        return self.epoch_start + t * self.interval_seconds

    def cell_bounds(self, i: int, j: int) -> tuple[float, float, float, float]:
        """(lon_lo, lon_hi, lat_lo, lat_hi) of cell (i, j)."""
        dlon = (self.lon_max - self.lon_min) / self.cols
        dlat = (self.lat_max - self.lat_min) / self.rows
        return (self.lon_min + j * dlon, self.lon_min + (j + 1) * dlon,
                self.lat_min + i * dlat, self.lat_min + (i + 1) * dlat)

    def to_dict(self) -> dict:
        return {
            "lon_min": self.lon_min, "lon_max": self.lon_max,
            "lat_min": self.lat_min, "lat_max": self.lat_max,
            "rows": self.rows, "cols": self.cols,
            "interval_seconds": self.interval_seconds,
            "epoch_start": self.epoch_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            lon_min=float(d["lon_min"]), lon_max=float(d["lon_max"]),
            lat_min=float(d["lat_min"]), lat_max=float(d["lat_max"]),
            rows=int(d["rows"]), cols=int(d["cols"]),
            interval_seconds=int(d["interval_seconds"]),
            epoch_start=int(d.get("epoch_start", 0)),
        )

    @classmethod
    def load(cls, path) -> "GridSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FlowSeries:
    """Interval-indexed flow tensors, stored as contiguous segments.

    Each segment is ``(start_index, array of shape (n, 2, rows, cols))``.
    """

    grid: GridSpec
    segments: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.segments = sorted(self.segments, key=lambda s: s[0])
        prev_end = None
        for start, block in self.segments:
            if block.ndim != 4 or block.shape[1:] != self.grid.shape:
                raise ValueError(f"segment at {start} has shape {block.shape}, "
                                 f"expected (n, {self.grid.shape})")
            if prev_end is not None and start < prev_end:
                raise ValueError(f"segment at {start} overlaps previous segment")
            prev_end = start + len(block)

    def __len__(self) -> int:
        return sum(len(b) for _, b in self.segments)

    def __contains__(self, t: int) -> bool:
        return self.segment_of(t) is not None

    def segment_of(self, t: int) -> int | None:
        for k, (start, block) in enumerate(self.segments):
            if start <= t < start + len(block):
                return k
        return None

    def get(self, t: int) -> np.ndarray | None:
        k = self.segment_of(t)
        if k is None:
            return None
        start, block = self.segments[k]
        return block[t - start]

    def __getitem__(self, t: int) -> np.ndarray:
        x = self.get(t)
        if x is None:
            raise KeyError(t)
        return x

    def indices(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(s, s + len(b)) for s, b in self.segments])

    def stacked(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((0,) + self.grid.shape)
        return np.concatenate([b for _, b in self.segments])

    @property
    def first_index(self) -> int:
        return self.segments[0][0]

    @property
    def end_index(self) -> int:
        start, block = self.segments[-1]
        return start + len(block)

    def map(self, fn) -> "FlowSeries":
        return FlowSeries(self.grid, [(s, fn(b)) for s, b in self.segments])

    def window(self, start: int, stop: int) -> "FlowSeries":
        """Restrict to intervals in [start, stop)."""
        segs = []
        for s, b in self.segments:
            lo, hi = max(s, start), min(s + len(b), stop)
            if lo < hi:
                segs.append((lo, b[lo - s:hi - s]))
        return FlowSeries(self.grid, segs)

    def appended(self, t: int, tensor: np.ndarray) -> "FlowSeries":
        """New series with ``tensor`` at interval ``t`` (must be past the end)."""
        tensor = np.asarray(tensor)[None]
        if self.segments and t < self.end_index:
            raise ValueError(f"interval {t} is not after the series end {self.end_index}")
        segs = list(self.segments)
        if segs and t == self.end_index:
            s, b = segs[-1]
            segs[-1] = (s, np.concatenate([b, tensor.astype(b.dtype)]))
        else:
            segs.append((t, tensor))
        return FlowSeries(self.grid, segs)


@dataclass
class BuildSummary:
    n_points: int = 0
    n_malformed: int = 0
    n_uncovered: int = 0
    n_intervals: int = 0


def locate(grid: GridSpec, point) -> tuple[int, int] | None:
    lon, lat = point.lon, point.lat
    if not (grid.lon_min <= lon <= grid.lon_max and grid.lat_min <= lat <= grid.lat_max):
        return None
    j = min(int((lon - grid.lon_min) * grid.cols / (grid.lon_max - grid.lon_min)), grid.cols - 1)
    i = min(int((lat - grid.lat_min) * grid.rows / (grid.lat_max - grid.lat_min)), grid.rows - 1)
    return i, j


def locate_many(grid: GridSpec, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Flat cell index ``i * cols + j`` per point, -1 outside the box."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    inside = ((lon >= grid.lon_min) & (lon <= grid.lon_max)
              & (lat >= grid.lat_min) & (lat <= grid.lat_max))
    with np.errstate(invalid="ignore"):
        j = np.floor((lon - grid.lon_min) * grid.cols / (grid.lon_max - grid.lon_min))
        i = np.floor((lat - grid.lat_min) * grid.rows / (grid.lat_max - grid.lat_min))
    j = np.clip(np.nan_to_num(j), 0, grid.cols - 1).astype(np.int64)
    i = np.clip(np.nan_to_num(i), 0, grid.rows - 1).astype(np.int64)
    return np.where(inside, i * grid.cols + j, -1)


def segment_by_interval(points: Iterable[GeoPoint], grid: GridSpec) -> dict[int, dict[str, list[GeoPoint]]]:
    """Group points into per-interval, per-object trajectories sorted by time."""
    out: dict[int, dict[str, list[GeoPoint]]] = {}
    for p in points:
        t = grid.interval_of(p.timestamp)
        out.setdefault(t, {}).setdefault(p.object_id, []).append(p)
    for trajs in out.values():
        for pts in trajs.values():
            # list.sort is stable, so equal timestamps keep input order
            pts.sort(key=lambda q: q.timestamp)
    return out


def _transition_masks(cells: np.ndarray, traj_start: np.ndarray, traj_end: np.ndarray):
    """Masks of points that enter / leave their cell.

    ``cells`` holds flat cell ids (-1 outside) of concatenated trajectories;
    ``traj_start``/``traj_end`` flag the first/last point of each trajectory.
    """
    prev = np.empty_like(cells)
    prev[1:] = cells[:-1]
    prev[traj_start] = -2  # no predecessor
    nxt = np.empty_like(cells)
    nxt[:-1] = cells[1:]
    nxt[traj_end] = -2
    inside = cells >= 0
    entering = inside & ~traj_start & (prev != cells)
    leaving = inside & ~traj_end & (nxt != cells)
    return entering, leaving


def compute_flows(grid: GridSpec, trajectories) -> np.ndarray:
    """Inflow/outflow tensor of shape (2, rows, cols) for one interval.

    ``trajectories`` is a mapping (or iterable) of timestamp-sorted point lists.
    """
    if isinstance(trajectories, dict):
        trajectories = trajectories.values()
    lon, lat, starts, ends = [], [], [], []
    for traj in trajectories:
        n = len(traj)
        if n == 0:
            continue
        lon.extend(p.lon for p in traj)
        lat.extend(p.lat for p in traj)
        s = np.zeros(n, dtype=bool)
        s[0] = True
        starts.append(s)
        ends.append(s[::-1].copy())
    n_cells = grid.rows * grid.cols
    if not lon:
        return np.zeros(grid.shape, dtype=np.int64)
    cells = locate_many(grid, np.array(lon), np.array(lat))
    entering, leaving = _transition_masks(cells, np.concatenate(starts), np.concatenate(ends))
    inflow = np.bincount(cells[entering], minlength=n_cells)
    outflow = np.bincount(cells[leaving], minlength=n_cells)
    return np.stack([inflow, outflow]).reshape(grid.shape).astype(np.int64)


def _normalize_coverage(coverage) -> list[tuple[int, int]]:
    spans = sorted((int(a), int(b)) for a, b in coverage if b > a)
    merged: list[tuple[int, int]] = []
    for a, b in spans:
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
        else:
            merged.append((a, b))
    return merged


def build_series(grid: GridSpec, points, coverage: Sequence[tuple[int, int]] | None = None
                 ) -> tuple[FlowSeries, BuildSummary]:
    """Count flows for every interval of a point stream.

    ``coverage`` lists half-open ``(start, stop)`` interval spans the feed is
    known to cover; without it the stream is assumed to cover one span from
    its first to its last interval.  Points outside any covered span, or with
    invalid coordinates, are skipped and counted in the summary.
    """
    if isinstance(points, PointTable):
        table = points
    else:
        table = PointTable.from_points(points)
    summary = BuildSummary(n_malformed=table.n_malformed)

    ok = table.valid_mask() & (table.timestamp >= grid.epoch_start)
    summary.n_malformed += int((~ok).sum())
    idx = np.nonzero(ok)[0]
    interval = (table.timestamp[idx] - grid.epoch_start) // grid.interval_seconds

    if coverage is None:
        spans = [(int(interval.min()), int(interval.max()) + 1)] if len(idx) else []
    else:
        spans = _normalize_coverage(coverage)
    covered = np.zeros(len(idx), dtype=bool)
    for a, b in spans:
        covered |= (interval >= a) & (interval < b)
    summary.n_uncovered = int((~covered).sum())
    idx, interval = idx[covered], interval[covered]
    summary.n_points = len(idx)

    # stable: interval, object, timestamp, then input position
    order = np.lexsort((table.timestamp[idx], table.object_code[idx], interval))
    idx, interval = idx[order], interval[order]
    obj = table.object_code[idx]
    cells = locate_many(grid, table.lon[idx], table.lat[idx])
    n = len(idx)
    new_traj = np.ones(n, dtype=bool)
    if n:
        new_traj[1:] = (interval[1:] != interval[:-1]) | (obj[1:] != obj[:-1])
    end_traj = np.ones(n, dtype=bool)
    if n:
        end_traj[:-1] = new_traj[1:]

    n_cells = grid.rows * grid.cols
    segments = []
    lo = int(spans[0][0]) if spans else 0
    hi = int(spans[-1][1]) if spans else 0
    total = np.zeros((max(hi - lo, 0), 2, n_cells), dtype=np.int64)
    if n:
        entering, leaving = _transition_masks(cells, new_traj, end_traj)
        rel = interval - lo
        np.add.at(total, (rel[entering], INFLOW, cells[entering]), 1)
        np.add.at(total, (rel[leaving], OUTFLOW, cells[leaving]), 1)
    total = total.reshape((-1,) + grid.shape)
    for a, b in spans:
        segments.append((a, total[a - lo:b - lo].copy()))
    summary.n_intervals = sum(b - a for a, b in spans)
    return FlowSeries(grid, segments), summary


@dataclass
class PointTable:
    """Column-oriented point storage used for bulk ingestion."""

    object_id: np.ndarray      # original identifiers (object dtype)
    object_code: np.ndarray    # dense integer codes
    timestamp: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    n_malformed: int = 0

    def __len__(self) -> int:
        return len(self.timestamp)

    def valid_mask(self) -> np.ndarray:
        return ((self.lon >= -180) & (self.lon <= 180) & (self.lat >= -90) & (self.lat <= 90)
                & np.isfinite(self.lon) & np.isfinite(self.lat))

    @classmethod
    def from_points(cls, points: Iterable[GeoPoint]) -> "PointTable":
        ids, ts, lon, lat = [], [], [], []
        bad = 0
        for p in points:
            try:
                t, x, y = int(p.timestamp), float(p.lon), float(p.lat)
            except (TypeError, ValueError, OverflowError):
                bad += 1
                continue
            ids.append(p.object_id)
            ts.append(t)
            lon.append(x)
            lat.append(y)
        return cls.from_columns(ids, ts, lon, lat, n_malformed=bad)

    @classmethod
    def from_columns(cls, ids, ts, lon, lat, n_malformed: int = 0, codes=None) -> "PointTable":
        """Build from columns; ``codes`` may supply precomputed integer object codes."""
        ids = np.asarray(ids, dtype=object)
        if codes is not None:
            codes = np.asarray(codes)
        elif len(ids):
            _, codes = np.unique(ids.astype(str), return_inverse=True)
        else:
            codes = np.zeros(0, dtype=np.int64)
        return cls(ids, codes.astype(np.int64), np.asarray(ts, dtype=np.int64),
                   np.asarray(lon, dtype=np.float64), np.asarray(lat, dtype=np.float64),
                   n_malformed)

    def points(self) -> Iterator[GeoPoint]:
        for k in range(len(self)):
            yield GeoPoint(self.object_id[k], int(self.timestamp[k]),
                           float(self.lon[k]), float(self.lat[k]))


# --- trajectory CSV -------------------------------------------------------

CSV_HEADER = ["object_id", "timestamp", "lon", "lat"]


def parse_trajectory_csv(text: str) -> PointTable:
    """Parse ``object_id,timestamp,lon,lat`` rows; bad rows are counted, not fatal."""
    reader = csv.reader(io.StringIO(text))
    ids, ts, lon, lat = [], [], [], []
    bad = 0
    header_seen = False
    for row in reader:
        if not row:
            continue
        if not header_seen:
            header_seen = True
            if [c.strip() for c in row] == CSV_HEADER:
                continue
        if len(row) != 4:
            bad += 1
            continue
        try:
            t = int(row[1])
            x, y = float(row[2]), float(row[3])
        except ValueError:
            bad += 1
            continue
        if not (math.isfinite(x) and math.isfinite(y) and -180 <= x <= 180 and -90 <= y <= 90):
            bad += 1
            continue
        ids.append(row[0])
        ts.append(t)
        lon.append(x)
        lat.append(y)
    return PointTable.from_columns(ids, ts, lon, lat, n_malformed=bad)


def read_trajectory_csv(path) -> PointTable:
    return parse_trajectory_csv(Path(path).read_text(encoding="utf-8"))


def format_trajectory_csv(points: Iterable[GeoPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow([p.object_id, int(p.timestamp), repr(float(p.lon)), repr(float(p.lat))])
    return buf.getvalue()


# --- FLW1 binary format ---------------------------------------------------

def encode_flw(grid: GridSpec, first_index: int, tensors: np.ndarray) -> bytes:
    """One FLW1 block: header plus ``n`` tensors of u32 counts."""
    tensors = np.asarray(tensors)
    if tensors.ndim == 3:
        tensors = tensors[None]
    if tensors.shape[1:] != grid.shape:
        raise ValueError(f"tensor shape {tensors.shape[1:]} does not match grid {grid.shape}")
    if np.any(tensors < 0) or np.any(tensors != np.round(tensors)):
        raise ValueError("FLW1 stores nonnegative integer counts only")
    header = _FLW_HEADER.pack(FLW_MAGIC, grid.rows, grid.cols, grid.epoch_start,
                              grid.interval_seconds, len(tensors), first_index)
    return header + np.ascontiguousarray(tensors, dtype="<u4").tobytes()


def encode_series(series: FlowSeries) -> bytes:
    """A series is stored as one FLW1 block per contiguous segment."""
    return b"".join(encode_flw(series.grid, s, b) for s, b in series.segments)


def decode_flw(data: bytes, grid: GridSpec | None = None) -> FlowSeries:
    segments = []
    offset = 0
    dims = None
    while offset < len(data):
        if len(data) - offset < _FLW_HEADER.size:
            raise ValueError("truncated FLW1 header")
        magic, rows, cols, epoch, dt, n, first = _FLW_HEADER.unpack_from(data, offset)
        if magic != FLW_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {FLW_MAGIC!r}")
        offset += _FLW_HEADER.size
        if dims is None:
            dims = (rows, cols, epoch, dt)
        elif dims != (rows, cols, epoch, dt):
            raise ValueError("FLW1 blocks disagree on grid dimensions")
        count = n * 2 * rows * cols
        end = offset + 4 * count
        if end > len(data):
            raise ValueError("truncated FLW1 payload")
        block = np.frombuffer(data, dtype="<u4", count=count, offset=offset)
        segments.append((first, block.astype(np.int64).reshape(n, 2, rows, cols)))
        offset = end
    if dims is None:
        raise ValueError("empty FLW1 data")
    rows, cols, epoch, dt = dims
    if grid is None:
        # the format carries no bounding box; use a unit-cell placeholder
        grid = GridSpec(0.0, float(cols), 0.0, float(rows), rows, cols, dt, epoch)
    elif (grid.rows, grid.cols, grid.epoch_start, grid.interval_seconds) != dims:
        raise ValueError(f"FLW1 header {dims} does not match grid spec")
    return FlowSeries(grid, segments)


def write_flw(path, series: FlowSeries) -> None:
    Path(path).write_bytes(encode_series(series))


def read_flw(path, grid: GridSpec | None = None) -> FlowSeries:
    return decode_flw(Path(path).read_bytes(), grid)
