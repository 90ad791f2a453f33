import logging

import numpy as np
import pytest

from synhat.align import (
    VisitHistory,
    align,
    radius_query,
    sample_activity,
    temporal_density,
)
from synhat.quadtree import equirectangular
from synhat.types import HAT, Event, LatentSTStates, POIIndex

from conftest import make_hat


@pytest.fixture
def grid_index():
    ids, coords = [], []
    for i in range(5):
        for j in range(5):
            ids.append(f"g{i}{j}")
            coords.append((40.0 + i * 0.01, -74.0 + j * 0.01))
    return POIIndex(ids=ids, coords=np.array(coords))


class TestRadiusQuery:
    def test_zero_radius_exact_poi(self, grid_index):
        hits = radius_query(grid_index, (40.02, -73.97), 0.0)
        assert [grid_index.ids[h] for h in hits] == ["g23"]

    def test_city_diameter_returns_all(self, grid_index):
        hits = radius_query(grid_index, (40.02, -74.02), 1e7)
        assert len(hits) == 25

    def test_thousand_random_queries_match_bruteforce(self, rng):
        coords = np.column_stack([
            rng.uniform(39.9, 40.1, 1000), rng.uniform(-74.1, -73.9, 1000)
        ])
        index = POIIndex(ids=[f"p{i}" for i in range(1000)], coords=coords)
        for _ in range(1000):
            c = (rng.uniform(39.9, 40.1), rng.uniform(-74.1, -73.9))
            r = rng.uniform(0, 3000)
            got = index.query_radius(c, r)
            want = index.query_radius_bruteforce(c, r)
            np.testing.assert_array_equal(got, want)

    def test_negative_radius_rejected(self, grid_index):
        with pytest.raises(ValueError):
            radius_query(grid_index, (40.0, -74.0), -1.0)


def history_with_visit(index, poi, t, count=1):
    h = VisitHistory(counts=np.zeros((len(index), 168)))
    b = int((t % h.period_seconds) // h.bin_seconds)
    h.counts[index.ids.index(poi), b] = count
    return h


class TestTemporalDensity:
    def test_all_zero_history(self, grid_index):
        h = VisitHistory(counts=np.zeros((25, 168)))
        d = temporal_density(np.arange(5), 1000.0, h)
        np.testing.assert_array_equal(d, np.zeros(5))

    def test_single_visit_at_bin_center_gives_kernel_peak(self, grid_index):
        t = 3 * 3600.0 + 1800.0  # center of bin 3
        h = history_with_visit(grid_index, "g00", t)
        d = temporal_density(np.array([0]), t, h)
        assert d[0] == pytest.approx(1.0)  # K(0) * 1

    def test_counts_scale_densities_linearly(self, grid_index):
        t = 1800.0
        h = VisitHistory(counts=np.zeros((25, 168)))
        h.counts[0, 0] = 1
        h.counts[1, 0] = 3
        d = temporal_density(np.array([0, 1]), t, h)
        assert d[1] / d[0] == pytest.approx(3.0)  # direct summation oracle

    def test_window_truncation(self, grid_index):
        # a visit 3 bandwidths away contributes nothing at truncate=2
        h = VisitHistory(counts=np.zeros((25, 168)), bandwidth=3600.0, truncate=2.0)
        h.counts[0, 10] = 5.0
        t_center_bin10 = 10 * 3600.0 + 1800.0
        far = t_center_bin10 + 3 * 3600.0 + 1.0
        assert temporal_density(np.array([0]), far, h)[0] == 0.0
        near = t_center_bin10 + 3600.0
        assert temporal_density(np.array([0]), near, h)[0] > 0.0

    def test_weekly_folding(self, grid_index):
        t = 5 * 3600.0 + 1800.0
        h = history_with_visit(grid_index, "g00", t)
        next_week = t + 7 * 86400.0
        assert temporal_density(np.array([0]), next_week, h)[0] == pytest.approx(1.0)

    def test_exponential_kernel(self):
        h = VisitHistory(counts=np.ones((1, 168)), kernel="exponential")
        d = temporal_density(np.array([0]), 1800.0, h)
        assert d[0] > 0

    def test_empty_candidates_rejected(self):
        h = VisitHistory(counts=np.zeros((1, 168)))
        with pytest.raises(ValueError):
            temporal_density(np.array([]), 0.0, h)

    def test_save_load_round_trip(self, tmp_path):
        h = VisitHistory(counts=np.arange(12.0).reshape(2, 6), bin_seconds=60.0,
                         period_seconds=360.0, kernel="exponential",
                         bandwidth=120.0, truncate=1.5)
        p = tmp_path / "hist.npz"
        h.save(p)
        back = VisitHistory.load(p)
        np.testing.assert_array_equal(back.counts, h.counts)
        assert back.kernel == "exponential" and back.bandwidth == 120.0


class TestSampleActivity:
    def test_single_candidate_certain(self, rng):
        assert sample_activity(np.array([7]), np.array([0.0]), rng) == 7

    def test_symmetric_densities_uniform(self, rng):
        draws = [sample_activity(np.array([0, 1]), np.array([2.0, 2.0]), rng)
                 for _ in range(10000)]
        frac = np.mean(np.array(draws) == 0)
        # 3 sigma of a fair Bernoulli over 1e4 draws
        assert abs(frac - 0.5) < 3 * 0.005

    def test_density_ratio_one_to_three(self, rng):
        draws = [sample_activity(np.array([0, 1]), np.array([1.0, 3.0]), rng)
                 for _ in range(10000)]
        frac = np.mean(np.array(draws) == 0)
        assert abs(frac - 0.25) < 0.02  # Monte-Carlo oracle

    def test_all_zero_densities_fall_back_to_uniform(self, rng):
        draws = [sample_activity(np.array([3, 9]), np.array([0.0, 0.0]), rng)
                 for _ in range(2000)]
        frac = np.mean(np.array(draws) == 3)
        assert 0.4 < frac < 0.6

    def test_probabilities_normalize_exactly(self):
        d = np.array([0.2, 0.3, 0.5])
        assert abs((d / d.sum()).sum() - 1.0) < 1e-12


class TestAlign:
    def test_state_on_poi_with_tight_radius(self, grid_index, rng):
        h = VisitHistory(counts=np.ones((25, 168)))
        states = LatentSTStates(coords=np.array([[40.02, -73.97]]),
                                ticks=np.array([600.0]))
        hat = align(states, grid_index, h, r=50.0, rng=rng, duration=86400.0)
        assert hat.events[0].activity_id == "g23"
        assert hat.events[0].timestamp == 600.0

    def test_empty_states_rejected(self, grid_index, rng):
        states = LatentSTStates(coords=np.zeros((0, 2)), ticks=np.zeros(0))
        with pytest.raises(ValueError):
            align(states, grid_index, VisitHistory(counts=np.ones((25, 168))),
                  200.0, rng)

    def test_every_event_within_escalated_radius(self, grid_index, rng):
        h = VisitHistory(counts=np.ones((25, 168)))
        src = np.column_stack([rng.uniform(40.0, 40.04, 40),
                               rng.uniform(-74.0, -73.96, 40)])
        states = LatentSTStates(coords=src, ticks=np.arange(40) * 600.0)
        hat = align(states, grid_index, h, r=200.0, rng=rng, duration=86400.0)
        assert len(hat.events) == len(src)  # nothing dropped inside the grid
        # distance-audit oracle: every output POI within the escalation cap
        origin = grid_index.origin()
        max_r = 200.0 * 2 ** 3
        for e, coord in zip(hat.events, src):
            a = equirectangular(np.array([[e.lat, e.lon]]), origin)[0]
            b = equirectangular(coord.reshape(1, 2), origin)[0]
            assert np.linalg.norm(a - b) <= max_r

    def test_unreachable_state_dropped_with_warning(self, grid_index, rng, caplog):
        # second state is ~100 km away; radius cap is 1.6 km
        states = LatentSTStates(coords=np.array([[40.0, -74.0], [41.0, -74.0]]),
                                ticks=np.array([0.0, 600.0]))
        h = VisitHistory(counts=np.ones((25, 168)))
        with caplog.at_level(logging.WARNING):
            hat = align(states, grid_index, h, r=200.0, rng=rng, duration=86400.0)
        assert len(hat.events) == 1
        assert any("dropped" in r.message for r in caplog.records)

    def test_timestamps_never_altered(self, grid_index, rng):
        ticks = np.sort(rng.uniform(0, 86400, 20))
        states = LatentSTStates(
            coords=np.tile([[40.02, -74.02]], (20, 1)), ticks=ticks)
        h = VisitHistory(counts=np.ones((25, 168)))
        hat = align(states, grid_index, h, r=500.0, rng=rng, duration=86400.0)
        np.testing.assert_array_equal([e.timestamp for e in hat.events], ticks)
