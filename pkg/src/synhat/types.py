"""Core domain types shared by every other module.

A human activity trace (HAT) is a time-ordered sequence of POI-anchored
events; latent ST traces are their regular-grid (lat, lon, mask)
counterparts at a chosen temporal granularity.  All timestamps and
granularities are expressed in seconds relative to the trace window start;
the fine temporal unit is fixed at 60 s.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .quadtree import Quadtree, equirectangular

FINE_UNIT = 60.0  # seconds; resolution floor of fine-grained output


@dataclass(frozen=True)
class Event:
    """One timestamped POI-anchored activity."""

    activity_id: str
    lat: float
    lon: float
    timestamp: float  # seconds since trace-window start


@dataclass(frozen=True)
class HAT:
    """Time-ordered sequence of events over a window of length `duration` s."""

    trace_id: str
    events: tuple[Event, ...]
    duration: float

    def __len__(self) -> int:
        return len(self.events)


def validate_hat(h: HAT) -> list[str]:
    """Check HAT invariants; returns a list of violation messages (empty = ok)."""
    violations = []
    if len(h.events) < 1:
        violations.append("empty trace")
    prev_t = -math.inf
    for e in h.events:
        if not -90.0 <= e.lat <= 90.0:
            violations.append(f"lat out of range: {e.lat}")
        if not -180.0 <= e.lon <= 180.0:
            violations.append(f"lon out of range: {e.lon}")
        if not 0.0 <= e.timestamp < h.duration:
            violations.append(f"timestamp outside window: {e.timestamp}")
        if e.timestamp < prev_t:
            violations.append("non-monotonic timestamps")
        prev_t = e.timestamp
    return violations


@dataclass
class LatentSTTrace:
    """Regular-grid (lat, lon, mask) sequence at granularity `granularity` s.

    `coords` has shape (L, 2) in degrees, `mask` shape (L,).  Masks are
    binary {0, 1} when constructed from a real HAT and continuous in [0, 1]
    when produced by a generator.
    """

    granularity: float
    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.coords.shape != (len(self.mask), 2):
            raise ValueError(
                f"coords shape {self.coords.shape} does not match mask length {len(self.mask)}"
            )
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinates in latent trace")

    def __len__(self) -> int:
        return len(self.mask)


@dataclass
class LatentSTStates:
    """Mask-active subset of a latent trace, as (coordinate, tick) pairs.

    For coarse states `ticks` are integer slot indices; for fine states they
    are timestamps in seconds.  Ticks are strictly increasing.
    """

    coords: np.ndarray  # (K, 2)
    ticks: np.ndarray  # (K,)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        self.ticks = np.asarray(self.ticks, dtype=float).reshape(-1)
        if len(self.coords) != len(self.ticks):
            raise ValueError("coords/ticks length mismatch")
        if len(self.ticks) > 1 and not np.all(np.diff(self.ticks) > 0):
            raise ValueError("state ticks must be strictly increasing")

    def __len__(self) -> int:
        return len(self.ticks)


@dataclass
class POIIndex:
    """City POI set with a quadrant-partition spatial index over projected meters."""

    ids: list[str]
    coords: np.ndarray  # (P, 2) lat/lon degrees
    _tree: Quadtree = field(init=False, repr=False)
    _xy: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        if len(self.ids) != len(self.coords):
            raise ValueError("ids/coords length mismatch")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate activity ids in POI index")
        self._xy = equirectangular(self.coords, self.origin())
        self._tree = Quadtree.build(self._xy)

    def origin(self) -> tuple[float, float]:
        """Projection origin: mean POI coordinate."""
        return float(np.mean(self.coords[:, 0])), float(np.mean(self.coords[:, 1]))

    def project(self, coords: np.ndarray) -> np.ndarray:
        return equirectangular(np.asarray(coords, dtype=float), self.origin())

    def query_radius(self, coord: Sequence[float], radius_m: float) -> np.ndarray:
        """Indices of all POIs within `radius_m` meters (Euclidean, projected)."""
        xy = self.project(np.asarray(coord, dtype=float).reshape(1, 2))[0]
        return self._tree.query_radius(xy, radius_m)

    def query_radius_bruteforce(self, coord: Sequence[float], radius_m: float) -> np.ndarray:
        """Linear-scan reference for query_radius; same contract."""
        xy = self.project(np.asarray(coord, dtype=float).reshape(1, 2))[0]
        d2 = np.sum((self._xy - xy) ** 2, axis=1)
        return np.flatnonzero(d2 <= radius_m * radius_m)

    def __len__(self) -> int:
        return len(self.ids)


def poi_index_from_corpus(corpus: Iterable[HAT]) -> POIIndex:
    """Collect the distinct POIs observed in a corpus into an index."""
    seen: dict[str, tuple[float, float]] = {}
    for h in corpus:
        for e in h.events:
            seen.setdefault(e.activity_id, (e.lat, e.lon))
    if not seen:
        raise ValueError("corpus contains no events")
    ids = sorted(seen)
    coords = np.array([seen[i] for i in ids], dtype=float)
    return POIIndex(ids=ids, coords=coords)


@dataclass
class DatasetSplit:
    """Disjoint train/val/test partition of a corpus, seed-deterministic."""

    train: list[HAT]
    val: list[HAT]
    test: list[HAT]
    seed: int

    def __iter__(self) -> Iterator[list[HAT]]:
        return iter((self.train, self.val, self.test))


# --- canonical interchange format: JSON Lines, one trace per line ---------

def hat_to_json(h: HAT) -> str:
    return json.dumps(
        {
            "trace_id": h.trace_id,
            "duration": h.duration,
            "events": [
                {"poi": e.activity_id, "lat": e.lat, "lon": e.lon, "t": e.timestamp}
                for e in h.events
            ],
        },
        separators=(",", ":"),
    )


def hat_from_json(line: str, default_duration: float | None = None) -> HAT:
    obj = json.loads(line)
    events = tuple(
        Event(activity_id=str(ev["poi"]), lat=float(ev["lat"]), lon=float(ev["lon"]),
              timestamp=float(ev["t"]))
        for ev in obj["events"]
    )
    duration = obj.get("duration", default_duration)
    if duration is None:
        # tolerate files without a duration field: round the last event up
        # to the next whole fine unit
        last = events[-1].timestamp if events else 0.0
        duration = (math.floor(last / FINE_UNIT) + 1) * FINE_UNIT
    return HAT(trace_id=str(obj["trace_id"]), events=events, duration=float(duration))


def write_jsonl(path, corpus: Iterable[HAT]) -> None:
    with open(path, "w") as f:
        for h in corpus:
            f.write(hat_to_json(h))
            f.write("\n")


def read_jsonl(path, default_duration: float | None = None) -> list[HAT]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(hat_from_json(line, default_duration))
    return out
