"""Read-only HTTP JSON API over the pipeline's published snapshot."""

from __future__ import annotations

from typing import Callable

import numpy as np
from fastapi import FastAPI, HTTPException, Query

from .pipeline import Snapshot

API_VERSION = "v1"


def _tensor_json(t: int, x: np.ndarray) -> dict:
    return {"t": int(t), "inflow": x[0].tolist(), "outflow": x[1].tolist()}


def create_app(snapshot: Callable[[], Snapshot | None]) -> FastAPI:
    """Build the app; ``snapshot`` returns the latest published state or None."""
    app = FastAPI(title="cityflow", version=API_VERSION)

    def current() -> Snapshot:
        snap = snapshot()
        if snap is None:
            raise HTTPException(503, "no pipeline tick has completed yet")
        return snap

    @app.get("/v1/health")
    def health():
        snap = snapshot()
        if snap is None:
            return {"version": API_VERSION, "status": "waiting", "ticks": 0, "latest": None}
        return {"version": API_VERSION, "status": "ok", "ticks": snap.ticks, "latest": snap.latest}

    @app.get("/v1/flows/latest")
    def latest():
        snap = current()
        return {"version": API_VERSION, **_tensor_json(snap.latest, snap.flows[-1])}

    @app.get("/v1/forecast")
    def forecast(steps: int = Query(1)):
        snap = current()
        if not 1 <= steps <= snap.horizon:
            raise HTTPException(400, f"steps must be in [1, {snap.horizon}]")
        if len(snap.forecasts) < steps:
            raise HTTPException(503, "no forecast published yet")
        records = [{**_tensor_json(r.t, r.tensor), "checkpoint_id": r.checkpoint_id}
                   for r in snap.forecasts[:steps]]
        return {"version": API_VERSION, "records": records}

    @app.get("/v1/region/{i}/{j}")
    def region(i: int, j: int, window: int = Query(1)):
        snap = current()
        if not (0 <= i < snap.grid.rows and 0 <= j < snap.grid.cols):
            raise HTTPException(400, f"region ({i}, {j}) is outside the {snap.grid.rows}x{snap.grid.cols} grid")
        if not 1 <= window <= len(snap.intervals):
            raise HTTPException(400, f"window must be in [1, {len(snap.intervals)}]")
        flows = snap.flows[-window:]
        return {
            "version": API_VERSION,
            "region": [i, j],
            "t": list(snap.intervals[-window:]),
            "inflow": flows[:, 0, i, j].tolist(),
            "outflow": flows[:, 1, i, j].tolist(),
            "forecast": {
                "t": [r.t for r in snap.forecasts],
                "inflow": [float(r.tensor[0, i, j]) for r in snap.forecasts],
                "outflow": [float(r.tensor[1, i, j]) for r in snap.forecasts],
            },
        }

    return app
