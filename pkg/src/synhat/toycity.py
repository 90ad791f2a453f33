"""Bundled synthetic city: a 5x5 POI grid and scripted commuter traces.

The fixture ships in-repo so end-to-end runs need no external corpus.  Two
commuter archetypes give the data learnable structure: "local" commuters
live and work in the south-west with single check-ins per hour, while
"transfer" commuters cross town and log an extra transfer stop inside the
same hour slot as each commute arrival.  Whether an hour slot holds one or
two events therefore depends on the whole trace's geometry, not on the slot
alone.

Also provides a seeded random-walk generator used as a fidelity baseline.
"""

from __future__ import annotations

import numpy as np

from .pipeline import StageTrainConfig
from .types import HAT, Event, POIIndex

GRID = 5
LAT0, LON0 = 40.0, -74.0
SPACING_DEG = 0.008  # ~890 m in latitude
TOY_DURATION = 7 * 86400.0
DAY = 86400.0


def toy_poi_index() -> POIIndex:
    ids, coords = [], []
    for gy in range(GRID):
        for gx in range(GRID):
            ids.append(f"poi-{gy * GRID + gx:02d}")
            coords.append((LAT0 + gy * SPACING_DEG, LON0 + gx * SPACING_DEG))
    return POIIndex(ids=ids, coords=np.array(coords))


def _grid_id(gx: int, gy: int) -> int:
    return gy * GRID + gx


def _coord(gx: int, gy: int) -> tuple[float, float]:
    return LAT0 + gy * SPACING_DEG, LON0 + gx * SPACING_DEG


def _event(gx: int, gy: int, t: float) -> Event:
    lat, lon = _coord(gx, gy)
    return Event(activity_id=f"poi-{_grid_id(gx, gy):02d}", lat=lat, lon=lon,
                 timestamp=t)


def _jitter(rng, base_min: float, std_min: float) -> float:
    return float(np.clip(base_min + rng.normal(0, std_min), 0, 24 * 60 - 1)) * 60.0


def toy_corpus(n_traces: int = 200, seed: int = 7, p_local: float = 0.55) -> list[HAT]:
    """Scripted weekday/weekend commuter traces over 7 days (day 0 = Monday)."""
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(n_traces):
        local = rng.random() < p_local
        if local:
            home = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
            work = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
            if work == home:
                work = (home[0] + 1, home[1])
        else:
            home = (int(rng.integers(3, 5)), int(rng.integers(3, 5)))
            work = (int(rng.integers(0, 2)), int(rng.integers(0, 3)))
        lunch = ((work[0] + 1) % GRID, work[1])
        mid = (round((home[0] + work[0]) / 2), round((home[1] + work[1]) / 2))
        leisure = (int(np.clip(home[0] + rng.integers(-2, 3), 0, GRID - 1)),
                   int(np.clip(home[1] + rng.integers(-2, 3), 0, GRID - 1)))

        events = []
        for day in range(7):
            t0 = day * DAY
            if day < 5:
                events.append(_event(*home, t0 + _jitter(rng, 7 * 60 + 20, 10)))
                if local:
                    events.append(_event(*work, t0 + _jitter(rng, 8 * 60 + 40, 10)))
                    events.append(_event(*work, t0 + _jitter(rng, 17 * 60 + 10, 10)))
                else:
                    events.append(_event(*mid, t0 + _jitter(rng, 8 * 60 + 15, 6)))
                    events.append(_event(*work, t0 + _jitter(rng, 8 * 60 + 50, 6)))
                    events.append(_event(*work, t0 + _jitter(rng, 17 * 60 + 5, 6)))
                    events.append(_event(*mid, t0 + _jitter(rng, 17 * 60 + 40, 6)))
                events.append(_event(*lunch, t0 + _jitter(rng, 12 * 60 + 20, 12)))
                events.append(_event(*home, t0 + _jitter(rng, 19 * 60, 15)))
            else:
                events.append(_event(*home, t0 + _jitter(rng, 10 * 60 + 30, 20)))
                events.append(_event(*leisure, t0 + _jitter(rng, 14 * 60, 30)))
        events.sort(key=lambda e: e.timestamp)
        corpus.append(HAT(trace_id=f"toy-{i:04d}", events=tuple(events),
                          duration=TOY_DURATION))
    return corpus


def random_walk_corpus(reference: list[HAT], index: POIIndex, count: int,
                       seed: int = 0) -> list[HAT]:
    """Naive baseline: exponential waiting times, Gaussian spatial steps
    snapped to the nearest POI.  Matches the reference corpus only in mean
    event count and mean interval."""
    rng = np.random.default_rng(seed)
    lengths = np.array([len(h.events) for h in reference], dtype=float)
    mean_len = lengths.mean()
    intervals = np.concatenate([
        np.diff([e.timestamp for e in h.events]) for h in reference if len(h.events) > 1
    ])
    mean_gap = float(intervals.mean())
    steps = []
    for h in reference:
        pts = np.array([(e.lat, e.lon) for e in h.events])
        if len(pts) > 1:
            steps.append(np.linalg.norm(np.diff(pts, axis=0), axis=1))
    step_std = float(np.concatenate(steps).std()) or SPACING_DEG
    duration = reference[0].duration

    out = []
    for i in range(count):
        n = max(1, int(rng.poisson(mean_len)))
        t = float(rng.uniform(0, mean_gap))
        pos = index.coords[rng.integers(0, len(index))].copy()
        events = []
        for _ in range(n):
            if t >= duration:
                break
            d2 = np.sum((index.coords - pos) ** 2, axis=1)
            k = int(np.argmin(d2))
            events.append(Event(activity_id=index.ids[k],
                                lat=float(index.coords[k, 0]),
                                lon=float(index.coords[k, 1]), timestamp=t))
            t += float(rng.exponential(mean_gap))
            pos = pos + rng.normal(0, step_std, size=2)
        if not events:
            events = [Event(index.ids[0], float(index.coords[0, 0]),
                            float(index.coords[0, 1]), 0.0)]
        out.append(HAT(trace_id=f"walk-{i:04d}", events=tuple(events),
                       duration=duration))
    return out


def toy_stage_config(epochs: int, stage: int) -> StageTrainConfig:
    """Down-sized training preset for the bundled city (CPU-friendly)."""
    return StageTrainConfig(
        epochs=epochs,
        batch_size=64,
        base_channels=32,
        channel_multipliers=(1, 2, 4),
        blocks_per_scale=1,
        event_emphasis=(stage == 2),
        traces_per_batch=8,
        slots_per_trace=8,
    )
