import math
from datetime import datetime

import numpy as np
import pytest

from synhat.ingest import IngestConfig, build_corpus, parse_checkins, split
from synhat.types import Event, validate_hat

from conftest import make_hat

WINDOW = dict(window_start=datetime(2012, 4, 1), window_end=datetime(2012, 7, 1))


def fsq_row(user="u1", venue="v1", lat=40.7, lon=-74.0, when="Tue Apr 03 18:00:09 +0000 2012",
            tz="-240"):
    return "\t".join([user, venue, "4bf5", "Bar", str(lat), str(lon), tz, when])


def write_lines(tmp_path, lines, name="raw.tsv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


@pytest.fixture
def fsq_cfg():
    return IngestConfig(source_format="foursquare_tsv", duration=14 * 86400,
                        min_visits=5, **WINDOW)


class TestParseCheckins:
    def test_row_outside_window_dropped(self, tmp_path, fsq_cfg):
        p = write_lines(tmp_path, [
            fsq_row(when="Tue Apr 03 18:00:09 +0000 2012"),
            fsq_row(when="Sat Dec 01 18:00:09 +0000 2012"),
        ])
        by_user, stats = parse_checkins(p, fsq_cfg)
        assert stats.kept == 1 and stats.outside_window == 1
        assert len(by_user["u1"]) == 1

    def test_empty_file(self, tmp_path, fsq_cfg):
        p = write_lines(tmp_path, [""])
        by_user, stats = parse_checkins(p, fsq_cfg)
        assert by_user == {} and stats.malformed == 0

    def test_unparsable_coordinate_skipped_and_counted(self, tmp_path, fsq_cfg):
        p = write_lines(tmp_path, [fsq_row(lat="not-a-number"), fsq_row()])
        by_user, stats = parse_checkins(p, fsq_cfg)
        assert stats.malformed == 1 and stats.kept == 1

    def test_tz_offset_shifts_to_local_time(self, tmp_path, fsq_cfg):
        # 18:00 UTC with -240 min offset -> 14:00 local on Apr 3
        p = write_lines(tmp_path, [fsq_row()])
        by_user, _ = parse_checkins(p, fsq_cfg)
        t = by_user["u1"][0].timestamp
        expected = (datetime(2012, 4, 3, 14, 0, 9) - datetime(2012, 4, 1)).total_seconds()
        assert t == expected

    def test_bbox_filter(self, tmp_path):
        cfg = IngestConfig(source_format="foursquare_tsv", duration=14 * 86400,
                           min_visits=5, city_bbox=(40.0, 41.0, -75.0, -73.0), **WINDOW)
        p = write_lines(tmp_path, [fsq_row(lat=40.7), fsq_row(lat=50.0)])
        _, stats = parse_checkins(p, cfg)
        assert stats.outside_bbox == 1 and stats.kept == 1

    def test_gowalla_layout(self, tmp_path):
        cfg = IngestConfig(source_format="gowalla_tsv", duration=14 * 86400,
                           window_start=datetime(2009, 2, 1),
                           window_end=datetime(2010, 10, 31), min_visits=1)
        p = write_lines(tmp_path, ["7\t2010-10-19T23:55:27Z\t30.23\t-97.79\t22847"])
        by_user, stats = parse_checkins(p, cfg)
        assert stats.kept == 1
        assert by_user["7"][0].activity_id == "22847"

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError):
            IngestConfig(source_format="csv", duration=86400, min_visits=5, **WINDOW)


def events_at(days, user="u"):
    return [Event(activity_id=f"p{i}", lat=40.0, lon=-74.0, timestamp=d * 86400.0)
            for i, d in enumerate(days)]


class TestBuildCorpus:
    def cfg(self, min_visits=5):
        return IngestConfig(source_format="jsonl", duration=14 * 86400,
                            min_visits=min_visits, **WINDOW)

    def test_exactly_min_visits_excluded(self):
        by_user = {"u": events_at([1, 2, 3, 4, 5])}
        assert build_corpus(by_user, self.cfg()) == []

    def test_more_than_min_visits_included(self):
        by_user = {"u": events_at([1, 2, 3, 4, 5, 6])}
        corpus = build_corpus(by_user, self.cfg())
        assert len(corpus) == 1 and len(corpus[0].events) == 6

    def test_timestamps_rebased_to_tile_start(self):
        # first event on day 15 -> second tile [14, 28); rebased
        by_user = {"u": events_at([15, 16, 17, 18, 19, 20])}
        corpus = build_corpus(by_user, self.cfg())
        assert corpus[0].events[0].timestamp == 1 * 86400.0
        assert validate_hat(corpus[0]) == []

    def test_only_first_window_contributes(self):
        by_user = {"u": events_at([1, 2, 3, 4, 5, 6, 20, 21, 22])}
        corpus = build_corpus(by_user, self.cfg())
        assert len(corpus) == 1 and len(corpus[0].events) == 6

    def test_every_corpus_hat_validates(self):
        by_user = {f"u{k}": events_at([k % 3 + i for i in range(7)], user=f"u{k}")
                   for k in range(5)}
        for h in build_corpus(by_user, self.cfg()):
            assert validate_hat(h) == []


class TestSplit:
    def test_exact_ratio_at_ten(self):
        corpus = [make_hat([1.0], trace_id=f"u{i}") for i in range(10)]
        parts = split(corpus, seed=0)
        assert (len(parts.train), len(parts.val), len(parts.test)) == (7, 1, 2)

    def test_deterministic_membership(self):
        corpus = [make_hat([1.0], trace_id=f"u{i}") for i in range(100)]
        a, b = split(corpus, seed=42), split(corpus, seed=42)
        assert [h.trace_id for h in a.train] == [h.trace_id for h in b.train]
        assert [h.trace_id for h in a.test] == [h.trace_id for h in b.test]

    def test_full_scale_sizes_match_floor_rule(self):
        # arithmetic oracle: floor(0.7n), floor(0.1n), remainder
        n = 4482
        expect = (math.floor(0.7 * n), math.floor(0.1 * n))
        expect = (*expect, n - sum(expect))
        corpus = [make_hat([1.0], trace_id=f"u{i}") for i in range(n)]
        parts = split(corpus, seed=1)
        assert (len(parts.train), len(parts.val), len(parts.test)) == expect
        assert expect == (3137, 448, 897)

    def test_partition_is_disjoint_and_complete(self):
        corpus = [make_hat([1.0], trace_id=f"u{i}") for i in range(57)]
        parts = split(corpus, seed=3)
        ids = [h.trace_id for part in parts for h in part]
        assert sorted(ids) == sorted(h.trace_id for h in corpus)

    def test_too_small_corpus_rejected(self):
        with pytest.raises(ValueError):
            split([make_hat([1.0])] * 9, seed=0)
