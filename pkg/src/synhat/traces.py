"""Convert HATs to and from latent spatio-temporal traces.

Coarse direction: bin events into slots of width `granularity` seconds,
average coordinates per slot, mark active slots in a temporal mask, fill
leading gaps with a dummy location, and linearly interpolate interior gaps
(trailing gaps hold the last value).

Fine direction: for each active coarse slot, build a minute-resolution
segment anchored on the neighbouring slot means half a slot away on either
side, passing through the slot's real events.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .types import FINE_UNIT, HAT, LatentSTStates, LatentSTTrace


def most_frequent_poi_coord(corpus: Iterable[HAT]) -> tuple[float, float]:
    """Coordinates of the most visited POI across a corpus (ties: lexicographic id)."""
    counts: Counter[str] = Counter()
    coords: dict[str, tuple[float, float]] = {}
    for h in corpus:
        for e in h.events:
            counts[e.activity_id] += 1
            coords.setdefault(e.activity_id, (e.lat, e.lon))
    if not counts:
        raise ValueError("empty corpus")
    best = max(counts, key=lambda a: (counts[a], a))
    return coords[best]


def build_coarse_trace(
    h: HAT,
    granularity: float,
    fill_coord: tuple[float, float] | None = None,
) -> LatentSTTrace:
    """Bin a HAT into a coarse latent ST trace of length L = duration/granularity.

    Active slots carry the mean coordinate of their events; leading empty
    slots are filled with `fill_coord` (dummy location, normally the corpus's
    most frequent POI; falls back to the first active coordinate when None);
    interior gaps are linearly interpolated; trailing gaps hold the last
    active value.
    """
    if len(h.events) == 0:
        raise ValueError("cannot build a latent trace from an empty HAT")
    ratio = h.duration / granularity
    length = int(round(ratio))
    if abs(ratio - length) > 1e-9 or length < 1:
        raise ValueError(
            f"granularity {granularity} does not divide duration {h.duration}"
        )
    sums = np.zeros((length, 2))
    counts = np.zeros(length)
    for e in h.events:
        slot = int(e.timestamp // granularity)
        sums[slot] += (e.lat, e.lon)
        counts[slot] += 1
    mask = (counts >= 1).astype(float)
    coords = np.zeros((length, 2))
    active = np.flatnonzero(counts)
    coords[active] = sums[active] / counts[active, None]

    known = counts >= 1
    first = active[0]
    if first > 0 and fill_coord is not None:
        coords[:first] = fill_coord
        known[:first] = True
    xs = np.flatnonzero(known)
    grid = np.arange(length)
    for c in range(2):
        coords[:, c] = np.interp(grid, xs, coords[xs, c])
    return LatentSTTrace(granularity=granularity, coords=coords, mask=mask)


def compress_to_states(trace: LatentSTTrace, stay_threshold: float = 0.5) -> LatentSTStates:
    """Keep (coordinate, slot) pairs where the mask reaches `stay_threshold`.

    For binary masks this is exact mask == 1 selection; generated traces have
    continuous masks and are thresholded.
    """
    sel = np.flatnonzero(trace.mask >= stay_threshold)
    return LatentSTStates(coords=trace.coords[sel], ticks=sel.astype(float))


@dataclass
class FineSegment:
    """Minute-resolution (coords, mask) block covering one coarse slot."""

    slot: int
    coords: np.ndarray  # (F, 2), F = granularity / 60
    mask: np.ndarray  # (F,)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.coords.shape != (len(self.mask), 2):
            raise ValueError("segment coords/mask shape mismatch")

    def __len__(self) -> int:
        return len(self.mask)


def fine_cells_per_slot(granularity: float) -> int:
    cells = granularity / FINE_UNIT
    f = int(round(cells))
    if abs(cells - f) > 1e-9 or f < 1:
        raise ValueError(f"granularity {granularity} is not a multiple of {FINE_UNIT}s")
    return f


def build_fine_segment(h: HAT, coarse: LatentSTTrace, slot: int) -> FineSegment:
    """Interpolated minute-grid segment for one active coarse slot.

    Anchors sit at the neighbouring slot means, half a slot outside the
    interval on both sides (travel to the next activity is assumed to take
    about half a slot), plus the slot's real events; only samples inside the
    slot are retained.  At sequence boundaries the missing neighbour is
    replaced by the slot's own mean coordinate.
    """
    if coarse.mask[slot] < 1:
        raise ValueError(f"slot {slot} is not active")
    gran = coarse.granularity
    f = fine_cells_per_slot(gran)
    start = slot * gran
    events = [e for e in h.events if start <= e.timestamp < start + gran]

    left_coord = coarse.coords[slot - 1] if slot > 0 else coarse.coords[slot]
    right_coord = coarse.coords[slot + 1] if slot < len(coarse) - 1 else coarse.coords[slot]
    anchor_t = [gran * (slot - 0.5)] + [e.timestamp for e in events] + [gran * (slot + 1.5)]
    anchor_c = [left_coord] + [(e.lat, e.lon) for e in events] + [right_coord]

    # merge duplicate timestamps (events in the same instant) by averaging
    ts, cs = [], []
    for t, c in sorted(zip(anchor_t, anchor_c), key=lambda p: p[0]):
        if ts and t - ts[-1] < 1e-9:
            cs[-1].append(c)
        else:
            ts.append(t)
            cs.append([c])
    anchor_t = np.array(ts)
    anchor_c = np.array([np.mean(group, axis=0) for group in cs])

    cell_t = start + np.arange(f) * FINE_UNIT
    coords = np.stack(
        [np.interp(cell_t, anchor_t, anchor_c[:, c]) for c in range(2)], axis=1
    )
    mask = np.zeros(f)
    cell_events: dict[int, list] = {}
    for e in events:
        cell = int((e.timestamp - start) // FINE_UNIT)
        cell_events.setdefault(cell, []).append((e.lat, e.lon))
    for cell, pts in cell_events.items():
        mask[cell] = 1.0
        coords[cell] = np.mean(pts, axis=0)
    return FineSegment(slot=slot, coords=coords, mask=mask)


def fine_cell_timestamp(slot: int, cell: int, granularity: float) -> float:
    """Timestamp (s) of a fine cell: slot start plus whole fine units."""
    return slot * granularity + cell * FINE_UNIT


def segments_to_states(
    segments: Sequence[FineSegment],
    granularity: float,
    event_threshold: float = 0.7,
) -> LatentSTStates:
    """Threshold fine masks and concatenate all segments into fine states.

    Ticks are absolute timestamps in seconds; segments must cover distinct
    slots so the result is strictly increasing.
    """
    coords, ticks = [], []
    for seg in sorted(segments, key=lambda s: s.slot):
        for cell in np.flatnonzero(seg.mask >= event_threshold):
            coords.append(seg.coords[cell])
            ticks.append(fine_cell_timestamp(seg.slot, int(cell), granularity))
    if not ticks:
        return LatentSTStates(coords=np.zeros((0, 2)), ticks=np.zeros(0))
    return LatentSTStates(coords=np.array(coords), ticks=np.array(ticks))


def states_to_hat_skeleton(fs: LatentSTStates) -> list[tuple[tuple[float, float], float]]:
    """Unpack fine states into ((lat, lon), timestamp) pairs, time-ordered."""
    out = []
    prev = -np.inf
    for coord, t in zip(fs.coords, fs.ticks):
        assert t > prev, "fine states must be strictly increasing in time"
        prev = t
        out.append(((float(coord[0]), float(coord[1])), float(t)))
    return out


@dataclass
class CoordNormalizer:
    """Per-city zero-mean unit-variance scaling of (lat, lon) degrees."""

    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, corpus: Iterable[HAT]) -> "CoordNormalizer":
        pts = np.array([(e.lat, e.lon) for h in corpus for e in h.events])
        if len(pts) == 0:
            raise ValueError("cannot fit a normalizer on an empty corpus")
        scale = pts.std(axis=0)
        scale[scale < 1e-9] = 1.0
        return cls(center=pts.mean(axis=0), scale=scale)

    def encode(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=float) - self.center) / self.scale

    def decode(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=float) * self.scale + self.center

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CoordNormalizer":
        return cls(center=np.array(d["center"]), scale=np.array(d["scale"]))


def trace_to_array(trace: LatentSTTrace, norm: CoordNormalizer) -> np.ndarray:
    """(3, L) float32 channels: normalized lat, normalized lon, mask in [-1, 1]."""
    coords = norm.encode(trace.coords).T
    mask = trace.mask * 2.0 - 1.0
    return np.concatenate([coords, mask[None]], axis=0).astype(np.float32)


def array_to_trace(arr: np.ndarray, granularity: float, norm: CoordNormalizer) -> LatentSTTrace:
    """Inverse of trace_to_array; mask channel is clipped back into [0, 1]."""
    coords = norm.decode(arr[:2].T.astype(float))
    mask = np.clip((arr[2].astype(float) + 1.0) / 2.0, 0.0, 1.0)
    return LatentSTTrace(granularity=granularity, coords=coords, mask=mask)


def segment_to_array(seg: FineSegment, norm: CoordNormalizer) -> np.ndarray:
    coords = norm.encode(seg.coords).T
    mask = seg.mask * 2.0 - 1.0
    return np.concatenate([coords, mask[None]], axis=0).astype(np.float32)


def array_to_segment(arr: np.ndarray, slot: int, norm: CoordNormalizer) -> FineSegment:
    coords = norm.decode(arr[:2].T.astype(float))
    mask = np.clip((arr[2].astype(float) + 1.0) / 2.0, 0.0, 1.0)
    return FineSegment(slot=slot, coords=coords, mask=mask)
