"""External factor records (calendar, holidays, weather) and their encoding."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ExternalRecord:
    interval: int
    day_of_week: int        # 0 = Monday
    is_weekend: bool
    is_holiday: bool
    weather_code: int
    temperature: float
    wind_speed: float


def calendar_of(timestamp: int) -> tuple[int, bool, str]:
    """(day_of_week, is_weekend, ISO date) of a UTC timestamp."""
    d = datetime.fromtimestamp(int(timestamp), tz=timezone.utc)
    dow = d.weekday()
    return dow, dow >= 5, d.date().isoformat()


@dataclass(frozen=True)
class ExternalSchema:
    """Layout of encoded external vectors.

    ``n_weather`` one-hot slots, the last of which is reserved for codes
    outside ``0 .. n_weather - 2``.  Temperature and wind are min-max scaled
    into [0, 1] with the fitted ranges and clamped outside them.
    """

    n_weather: int = 5
    temp_range: tuple[float, float] = (0.0, 1.0)
    wind_range: tuple[float, float] = (0.0, 1.0)
    holidays: frozenset[str] = field(default_factory=frozenset)

    @property
    def dim(self) -> int:
        return 7 + 1 + 1 + self.n_weather + 2

    @classmethod
    def fit(cls, records, n_weather: int = 5, holidays=()) -> "ExternalSchema":
        temps = [r.temperature for r in records]
        winds = [r.wind_speed for r in records]
        return cls(n_weather=n_weather,
                   temp_range=(min(temps), max(temps)) if temps else (0.0, 1.0),
                   wind_range=(min(winds), max(winds)) if winds else (0.0, 1.0),
                   holidays=frozenset(holidays))

    def to_dict(self) -> dict:
        return {"n_weather": self.n_weather, "temp_range": list(self.temp_range),
                "wind_range": list(self.wind_range), "holidays": sorted(self.holidays)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExternalSchema":
        return cls(n_weather=int(d["n_weather"]), temp_range=tuple(d["temp_range"]),
                   wind_range=tuple(d["wind_range"]), holidays=frozenset(d.get("holidays", ())))


def _scale01(x: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return min(max((x - lo) / (hi - lo), 0.0), 1.0)


def encode_external(day_of_week: int, is_weekend: bool, is_holiday: bool, weather_code: int,
                    temperature: float, wind_speed: float, schema: ExternalSchema) -> np.ndarray:
    """[dow one-hot(7), weekend, holiday, weather one-hot(n_weather), temp, wind]."""
    v = np.zeros(schema.dim)
    v[day_of_week] = 1.0
    v[7] = float(is_weekend)
    v[8] = float(is_holiday)
    slot = weather_code if 0 <= weather_code < schema.n_weather - 1 else schema.n_weather - 1
    v[9 + slot] = 1.0
    v[9 + schema.n_weather] = _scale01(temperature, *schema.temp_range)
    v[10 + schema.n_weather] = _scale01(wind_speed, *schema.wind_range)
    return v


def encode_record(rec: ExternalRecord, schema: ExternalSchema) -> np.ndarray:
    return encode_external(rec.day_of_week, rec.is_weekend, rec.is_holiday, rec.weather_code,
                           rec.temperature, rec.wind_speed, schema)


def encode_records(records, schema: ExternalSchema) -> dict[int, np.ndarray]:
    return {r.interval: encode_record(r, schema) for r in records}


def calendar_record(interval: int, timestamp: int, schema: ExternalSchema,
                    weather_from: ExternalRecord) -> ExternalRecord:
    """Record for ``interval`` with calendar fields recomputed and weather copied."""
    dow, weekend, day = calendar_of(timestamp)
    return replace(weather_from, interval=interval, day_of_week=dow, is_weekend=weekend,
                   is_holiday=day in schema.holidays)


# --- CSV with a schema header line ---------------------------------------

_COLUMNS = ["interval", "day_of_week", "is_weekend", "is_holiday", "weather_code",
            "temperature", "wind_speed"]


def format_externals_csv(records, schema: ExternalSchema) -> str:
    buf = io.StringIO()
    buf.write("#schema " + json.dumps(schema.to_dict(), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_COLUMNS)
    for r in records:
        w.writerow([r.interval, r.day_of_week, int(r.is_weekend), int(r.is_holiday),
                    r.weather_code, repr(float(r.temperature)), repr(float(r.wind_speed))])
    return buf.getvalue()


def parse_externals_csv(text: str) -> tuple[list[ExternalRecord], ExternalSchema]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#schema "):
        raise ValueError("externals CSV must start with a '#schema {...}' line")
    schema = ExternalSchema.from_dict(json.loads(lines[0][len("#schema "):]))
    reader = csv.DictReader(lines[1:])
    records = [
        ExternalRecord(int(row["interval"]), int(row["day_of_week"]), row["is_weekend"] == "1",
                       row["is_holiday"] == "1", int(row["weather_code"]),
                       float(row["temperature"]), float(row["wind_speed"]))
        for row in reader
    ]
    return records, schema


def write_externals_csv(path, records, schema: ExternalSchema) -> None:
    Path(path).write_text(format_externals_csv(records, schema))


def read_externals_csv(path) -> tuple[list[ExternalRecord], ExternalSchema]:
    return parse_externals_csv(Path(path).read_text())
