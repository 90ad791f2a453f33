"""Map generated continuous fine states to discrete POI-anchored activities.

For each state, candidate POIs are retrieved by radius search over the
quadrant-partition index; a candidate's weight is its kernel-smoothed visit
density at the state's time-of-week, and the activity is drawn from the
normalized weights.  Timestamps pass through unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .types import HAT, Event, LatentSTStates, POIIndex

log = logging.getLogger(__name__)

HISTORY_FORMAT_VERSION = 1


def radius_query(index: POIIndex, coord, r: float) -> np.ndarray:
    """Indices of all POIs within r meters of coord (Euclidean, projected)."""
    return index.query_radius(coord, r)


@dataclass
class VisitHistory:
    """Per-POI visit counts over periodic time bins, with a temporal kernel.

    Counts are folded onto one period (default a week); bins are `bin_seconds`
    wide.  Densities sum kernel-weighted counts over bins whose centers lie
    within `truncate * bandwidth` of the query time.
    """

    counts: np.ndarray  # (P, n_bins)
    bin_seconds: float = 3600.0
    period_seconds: float = 7 * 86400.0
    kernel: str = "gaussian"  # or "exponential"
    bandwidth: float = 3600.0  # seconds
    truncate: float = 2.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if np.any(self.counts < 0):
            raise ValueError("visit counts must be non-negative")
        if self.kernel not in ("gaussian", "exponential"):
            raise ValueError(f"unknown kernel: {self.kernel!r}")

    @property
    def n_bins(self) -> int:
        return self.counts.shape[1]

    @classmethod
    def build(cls, corpus, index: POIIndex, bin_seconds: float = 3600.0,
              period_seconds: float = 7 * 86400.0, kernel: str = "gaussian",
              bandwidth: float = 3600.0, truncate: float = 2.0) -> "VisitHistory":
        """Accumulate visit counts from a corpus (training split only)."""
        n_bins = int(round(period_seconds / bin_seconds))
        pos = {poi: i for i, poi in enumerate(index.ids)}
        counts = np.zeros((len(index), n_bins))
        for h in corpus:
            for e in h.events:
                i = pos.get(e.activity_id)
                if i is None:
                    continue
                b = int((e.timestamp % period_seconds) // bin_seconds) % n_bins
                counts[i, b] += 1
        return cls(counts=counts, bin_seconds=bin_seconds,
                   period_seconds=period_seconds, kernel=kernel,
                   bandwidth=bandwidth, truncate=truncate)

    def _kernel_values(self, offsets: np.ndarray) -> np.ndarray:
        if self.kernel == "gaussian":
            return np.exp(-0.5 * (offsets / self.bandwidth) ** 2)
        return np.exp(-np.abs(offsets) / self.bandwidth)

    def density(self, candidates: np.ndarray, t: float) -> np.ndarray:
        """Kernel-weighted visit density per candidate at time t (seconds)."""
        window = self.truncate * self.bandwidth
        t_mod = t % self.period_seconds
        centers = (np.arange(self.n_bins) + 0.5) * self.bin_seconds
        # periodic distance from the query time to each bin center
        raw = np.abs(centers - t_mod)
        dist = np.minimum(raw, self.period_seconds - raw)
        sel = dist <= window
        if not sel.any():
            return np.zeros(len(candidates))
        w = self._kernel_values(dist[sel])
        return self.counts[np.asarray(candidates, dtype=int)][:, sel] @ w

    def save(self, path) -> None:
        np.savez_compressed(
            path, format_version=HISTORY_FORMAT_VERSION, counts=self.counts,
            bin_seconds=self.bin_seconds, period_seconds=self.period_seconds,
            kernel=self.kernel, bandwidth=self.bandwidth, truncate=self.truncate,
        )

    @classmethod
    def load(cls, path) -> "VisitHistory":
        with np.load(path, allow_pickle=False) as z:
            version = int(z["format_version"])
            if version != HISTORY_FORMAT_VERSION:
                raise ValueError(f"unsupported visit-history version: {version}")
            return cls(
                counts=z["counts"], bin_seconds=float(z["bin_seconds"]),
                period_seconds=float(z["period_seconds"]), kernel=str(z["kernel"]),
                bandwidth=float(z["bandwidth"]), truncate=float(z["truncate"]),
            )


def temporal_density(candidates: np.ndarray, t: float, history: VisitHistory) -> np.ndarray:
    """Per-candidate visit density d_i(t) >= 0."""
    if len(candidates) == 0:
        raise ValueError("candidate set must be non-empty")
    return history.density(candidates, t)


def sample_activity(candidates: np.ndarray, densities: np.ndarray,
                    rng: np.random.Generator) -> int:
    """Categorical draw proportional to densities; uniform when all are zero."""
    candidates = np.asarray(candidates, dtype=int)
    if len(candidates) == 0:
        raise ValueError("candidate set must be non-empty")
    total = float(np.sum(densities))
    if total <= 0:
        p = np.full(len(candidates), 1.0 / len(candidates))
    else:
        p = np.asarray(densities, dtype=float) / total
    return int(rng.choice(candidates, p=p))


def align(states: LatentSTStates, index: POIIndex, history: VisitHistory,
          r: float, rng: np.random.Generator, trace_id: str = "synth",
          duration: float | None = None, max_escalations: int = 3) -> HAT:
    """Snap each fine state to a sampled POI within radius r (meters).

    Empty candidate sets double the radius up to `max_escalations` times;
    states that still have no candidates are dropped with a warning.
    Timestamps are preserved exactly.
    """
    if len(states) == 0:
        raise ValueError("cannot align an empty state sequence")
    events = []
    for coord, t in zip(states.coords, states.ticks):
        radius = r
        cand = index.query_radius(coord, radius)
        for _ in range(max_escalations):
            if len(cand):
                break
            radius *= 2
            cand = index.query_radius(coord, radius)
        if not len(cand):
            log.warning("no POI within %.0f m of (%.5f, %.5f); state dropped",
                        radius, coord[0], coord[1])
            continue
        dens = temporal_density(cand, float(t), history)
        k = sample_activity(cand, dens, rng)
        events.append(Event(activity_id=index.ids[k], lat=float(index.coords[k, 0]),
                            lon=float(index.coords[k, 1]), timestamp=float(t)))
    if duration is None:
        duration = (states.ticks[-1] // 60.0 + 1) * 60.0
    return HAT(trace_id=trace_id, events=tuple(events), duration=float(duration))
