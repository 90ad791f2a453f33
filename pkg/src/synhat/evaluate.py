"""Fidelity and privacy evaluation of synthetic HAT corpora.

Fidelity: Jensen-Shannon divergence (base 2) between real and synthetic
histograms of four per-trace statistics -- moving distance, radius of
gyration, inter-event interval, and trace length -- plus their average.
Privacy: Jaccard-style overlap between a synthetic trace and its closest
training trace under spatial/temporal matching tolerances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .types import HAT

METRICS = ("distance", "radius", "interval", "length")

EARTH_RADIUS_M = 6_371_000.0


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters (array-friendly)."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


@dataclass
class TraceStats:
    distances: np.ndarray  # (n-1,) meters between consecutive activities
    radius: float  # RMS distance to the centroid, meters
    intervals: np.ndarray  # (n-1,) seconds between consecutive activities
    length: int


def trace_statistics(h: HAT) -> TraceStats:
    if len(h.events) < 1:
        raise ValueError("trace statistics need at least one event")
    lat = np.array([e.lat for e in h.events])
    lon = np.array([e.lon for e in h.events])
    t = np.array([e.timestamp for e in h.events])
    if len(h.events) == 1:
        distances = np.zeros(0)
        intervals = np.zeros(0)
    else:
        distances = haversine_m(lat[:-1], lon[:-1], lat[1:], lon[1:])
        intervals = np.diff(t)
    center_lat, center_lon = lat.mean(), lon.mean()
    radius = float(np.sqrt(np.mean(haversine_m(lat, lon, center_lat, center_lon) ** 2)))
    return TraceStats(distances=distances, radius=radius, intervals=intervals,
                      length=len(h.events))


def corpus_statistics(corpus: Iterable[HAT]) -> dict[str, np.ndarray]:
    """Pooled per-metric samples across a corpus."""
    dist, rad, inter, length = [], [], [], []
    for h in corpus:
        s = trace_statistics(h)
        dist.append(s.distances)
        rad.append(s.radius)
        inter.append(s.intervals)
        length.append(s.length)
    return {
        "distance": np.concatenate(dist) if dist else np.zeros(0),
        "radius": np.array(rad, dtype=float),
        "interval": np.concatenate(inter) if inter else np.zeros(0),
        "length": np.array(length, dtype=float),
    }


@dataclass
class MetricHistogram:
    metric: str
    bin_edges: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        if np.any(self.probabilities < 0):
            raise ValueError("histogram probabilities must be non-negative")
        if abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise ValueError("histogram probabilities must sum to 1")

    @classmethod
    def from_samples(cls, metric: str, values: np.ndarray,
                     bin_edges: np.ndarray) -> "MetricHistogram":
        counts, _ = np.histogram(values, bins=bin_edges)
        total = counts.sum()
        if total == 0:
            raise ValueError(f"no samples for metric {metric!r}")
        return cls(metric=metric, bin_edges=bin_edges, probabilities=counts / total)


def jsd(p: MetricHistogram, q: MetricHistogram, eps: float = 1e-10) -> float:
    """Jensen-Shannon divergence, base-2 logarithm, in [0, 1].

    Zero-probability bins are smoothed by `eps` before the KL terms.
    """
    if p.bin_edges.shape != q.bin_edges.shape or not np.allclose(p.bin_edges, q.bin_edges):
        raise ValueError("histograms must share bin edges")
    a = p.probabilities + eps
    b = q.probabilities + eps
    a = a / a.sum()
    b = b / b.sum()
    m = 0.5 * (a + b)
    kl_am = np.sum(a * np.log2(a / m))
    kl_bm = np.sum(b * np.log2(b / m))
    return float(0.5 * kl_am + 0.5 * kl_bm)


def pooled_histograms(metric: str, real: np.ndarray, synth: np.ndarray,
                      bins: int = 50) -> tuple[MetricHistogram, MetricHistogram]:
    """Equal-width bins spanning the pooled real+synthetic range."""
    pooled = np.concatenate([real, synth])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return (MetricHistogram.from_samples(metric, real, edges),
            MetricHistogram.from_samples(metric, synth, edges))


@dataclass
class FidelityReport:
    jsd_by_metric: dict[str, float]
    average: float
    cdfs: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"jsd": self.jsd_by_metric, "average": self.average, "cdfs": self.cdfs}


def fidelity_report(real: Sequence[HAT], synth: Sequence[HAT],
                    bins: int = 50) -> FidelityReport:
    """Per-metric JSD, their unweighted mean, and CDF arrays for plotting."""
    if not len(real) or not len(synth):
        raise ValueError("both corpora must be non-empty")
    real_stats = corpus_statistics(real)
    synth_stats = corpus_statistics(synth)
    out, cdfs = {}, {}
    for metric in METRICS:
        p, q = pooled_histograms(metric, real_stats[metric], synth_stats[metric], bins)
        out[metric] = jsd(p, q)
        cdfs[metric] = {
            "x": p.bin_edges[1:].tolist(),
            "real": np.cumsum(p.probabilities).tolist(),
            "synthetic": np.cumsum(q.probabilities).tolist(),
        }
    return FidelityReport(jsd_by_metric=out, average=float(np.mean(list(out.values()))),
                          cdfs=cdfs)


@dataclass
class PrivacyConfig:
    tr_s: float = 200.0  # meters
    tr_t: float = 1800.0  # seconds
    sample_count: int = 1500

    def __post_init__(self):
        if self.tr_s < 0 or self.tr_t < 0:
            raise ValueError("tolerances must be non-negative")


def similarity(s1: HAT, s2: HAT, cfg: PrivacyConfig) -> float:
    """Matched-activity overlap: N_matched / (N1 + N2 - N_matched).

    Events match when both the spatial and temporal gaps are within the
    tolerances; N_matched is a maximum one-to-one bipartite matching.
    """
    n1, n2 = len(s1.events), len(s2.events)
    if n1 == 0 or n2 == 0:
        raise ValueError("similarity requires non-empty traces")
    lat1 = np.array([e.lat for e in s1.events])[:, None]
    lon1 = np.array([e.lon for e in s1.events])[:, None]
    t1 = np.array([e.timestamp for e in s1.events])[:, None]
    lat2 = np.array([e.lat for e in s2.events])[None, :]
    lon2 = np.array([e.lon for e in s2.events])[None, :]
    t2 = np.array([e.timestamp for e in s2.events])[None, :]
    adj = (haversine_m(lat1, lon1, lat2, lon2) <= cfg.tr_s) \
        & (np.abs(t1 - t2) <= cfg.tr_t)
    if not adj.any():
        return 0.0
    rows, cols = linear_sum_assignment(adj.astype(float), maximize=True)
    matched = int(adj[rows, cols].sum())
    return matched / (n1 + n2 - matched)


@dataclass
class PrivacyReport:
    max_similarities: np.ndarray
    p95: float
    cdf_x: np.ndarray
    cdf_y: np.ndarray

    def to_dict(self) -> dict:
        return {
            "p95": self.p95,
            "max_similarities": self.max_similarities.tolist(),
            "cdf": {"x": self.cdf_x.tolist(), "y": self.cdf_y.tolist()},
        }


def privacy_report(synth: Sequence[HAT], train: Sequence[HAT], cfg: PrivacyConfig,
                   seed: int = 0) -> PrivacyReport:
    """Max similarity of each sampled synthetic trace to any training trace."""
    if cfg.sample_count > len(synth):
        raise ValueError(
            f"sample_count {cfg.sample_count} exceeds synthetic corpus size {len(synth)}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(synth), size=cfg.sample_count, replace=False)
    sims = np.array([
        max(similarity(synth[i], s2, cfg) for s2 in train) for i in chosen
    ])
    order = np.sort(sims)
    cdf_y = np.arange(1, len(order) + 1) / len(order)
    return PrivacyReport(
        max_similarities=sims,
        p95=float(np.percentile(sims, 95)),
        cdf_x=order,
        cdf_y=cdf_y,
    )


def write_report_json(path, fidelity: FidelityReport,
                      privacy: PrivacyReport | None = None,
                      meta: dict | None = None) -> None:
    payload = {"fidelity": fidelity.to_dict()}
    if privacy is not None:
        payload["privacy"] = privacy.to_dict()
    if meta:
        payload["meta"] = meta
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def write_report_csv(path, fidelity: FidelityReport) -> None:
    with open(path, "w") as f:
        f.write("metric,jsd\n")
        for metric in METRICS:
            f.write(f"{metric},{fidelity.jsd_by_metric[metric]:.6f}\n")
        f.write(f"average,{fidelity.average:.6f}\n")
