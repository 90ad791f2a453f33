"""Parse raw check-in corpora and build a windowed HAT corpus.

Supported layouts:
  foursquare_tsv: user_id, venue_id, category_id, category_name, lat, lon,
                  tz_offset_minutes, utc_time ("Tue Apr 03 18:00:09 +0000 2012")
  gowalla_tsv:    user_id, check-in time (ISO 8601), lat, lon, location_id
  jsonl:          one check-in per line: {"user", "poi", "lat", "lon", "time"}

Foursquare rows are shifted to local time via the tz offset column; Gowalla
times are used as recorded.  Preprocessing order: window -> bbox -> minimum
visit count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable

import numpy as np

from .types import HAT, Event, DatasetSplit

SOURCE_FORMATS = ("foursquare_tsv", "gowalla_tsv", "jsonl")


@dataclass
class IngestConfig:
    source_format: str
    window_start: datetime
    window_end: datetime
    duration: float  # trace window length D in seconds
    min_visits: int = 5  # traces must have strictly more events than this
    city_bbox: tuple[float, float, float, float] | None = None  # lat0, lat1, lon0, lon1

    def __post_init__(self):
        if self.source_format not in SOURCE_FORMATS:
            raise ValueError(f"unknown source format: {self.source_format!r}")
        if self.window_end <= self.window_start:
            raise ValueError("window_end must be after window_start")
        if self.min_visits < 1:
            raise ValueError("min_visits must be >= 1")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass
class ParseStats:
    rows: int = 0
    kept: int = 0
    malformed: int = 0
    outside_window: int = 0
    outside_bbox: int = 0


def _parse_foursquare_time(field: str, tz_offset_min: str) -> datetime:
    dt = datetime.strptime(field, "%a %b %d %H:%M:%S %z %Y")
    local = dt + timedelta(minutes=int(tz_offset_min))
    return local.replace(tzinfo=None)


def _parse_iso_time(field: str) -> datetime:
    return datetime.fromisoformat(field.replace("Z", "+00:00")).replace(tzinfo=None)


def _row_to_checkin(line: str, fmt: str):
    """Returns (user, poi, lat, lon, naive local datetime) or raises."""
    if fmt == "foursquare_tsv":
        parts = line.split("\t")
        user, venue, _cat_id, _cat_name, lat, lon, tz_off, when = parts[:8]
        return user, venue, float(lat), float(lon), _parse_foursquare_time(when, tz_off)
    if fmt == "gowalla_tsv":
        user, when, lat, lon, loc = line.split("\t")[:5]
        return user, loc, float(lat), float(lon), _parse_iso_time(when)
    obj = json.loads(line)
    return (
        str(obj["user"]), str(obj["poi"]), float(obj["lat"]), float(obj["lon"]),
        _parse_iso_time(obj["time"]),
    )


def parse_checkins(path, cfg: IngestConfig) -> tuple[dict[str, list[Event]], ParseStats]:
    """Read raw check-ins grouped by user.

    Event timestamps are seconds since cfg.window_start.  Rows outside the
    window or bbox are dropped; malformed rows are counted and skipped.
    """
    stats = ParseStats()
    by_user: dict[str, list[Event]] = {}
    with open(path, encoding="utf-8", errors="replace") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            stats.rows += 1
            try:
                user, poi, lat, lon, when = _row_to_checkin(line, cfg.source_format)
            except (ValueError, KeyError, IndexError, json.JSONDecodeError):
                stats.malformed += 1
                continue
            if not (cfg.window_start <= when < cfg.window_end):
                stats.outside_window += 1
                continue
            if cfg.city_bbox is not None:
                lat0, lat1, lon0, lon1 = cfg.city_bbox
                if not (lat0 <= lat <= lat1 and lon0 <= lon <= lon1):
                    stats.outside_bbox += 1
                    continue
            t = (when - cfg.window_start).total_seconds()
            by_user.setdefault(user, []).append(
                Event(activity_id=poi, lat=lat, lon=lon, timestamp=t)
            )
            stats.kept += 1
    for events in by_user.values():
        events.sort(key=lambda e: e.timestamp)
    return by_user, stats


def build_corpus(by_user: dict[str, list[Event]], cfg: IngestConfig) -> list[HAT]:
    """Truncate each user's events to one fixed-length window and keep traces
    with more than cfg.min_visits events.

    Windows of length D tile the global range starting at window_start; each
    user contributes the first tile in which they have any events, rebased to
    the tile start.
    """
    d = cfg.duration
    total = (cfg.window_end - cfg.window_start).total_seconds()
    n_tiles = int(total // d)
    if n_tiles < 1:
        raise ValueError("duration longer than the global ingest window")
    corpus = []
    for user in sorted(by_user):
        events = by_user[user]
        if not events:
            continue
        tile = int(events[0].timestamp // d)
        if tile >= n_tiles:
            continue  # first event falls in a trailing partial tile
        t0, t1 = tile * d, (tile + 1) * d
        windowed = tuple(
            Event(e.activity_id, e.lat, e.lon, e.timestamp - t0)
            for e in events
            if t0 <= e.timestamp < t1
        )
        if len(windowed) > cfg.min_visits:
            corpus.append(HAT(trace_id=user, events=windowed, duration=d))
    return corpus


def split(corpus: list[HAT], seed: int) -> DatasetSplit:
    """Seed-deterministic 7:1:2 partition (floor train/val, remainder test)."""
    n = len(corpus)
    if n < 10:
        raise ValueError(f"corpus too small to split: {n} traces (need >= 10)")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(0.7 * n)
    n_val = math.floor(0.1 * n)
    train = [corpus[i] for i in order[:n_train]]
    val = [corpus[i] for i in order[n_train:n_train + n_val]]
    test = [corpus[i] for i in order[n_train + n_val:]]
    return DatasetSplit(train=train, val=val, test=test, seed=seed)
