import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ridepool.demand import (
    DemandStats,
    Request,
    compute_future_demand,
    demand_counts,
    epoch_batches,
    ingest_trip_records,
    synthesize_demand,
    write_requests,
)
from ridepool.oracles import future_demand_naive


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def nearest_node(net, lat, lon):
    kx = math.cos(math.radians(np.mean([c[0] for c in net.coords.values()])))
    return min(net.nodes, key=lambda u: (net.coords[u][0] - lat) ** 2 + ((net.coords[u][1] - lon) * kx) ** 2)


class TestRequest:
    def test_same_endpoints_rejected(self):
        with pytest.raises(ValueError):
            Request(0, 3, 3, 0)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            Request(0, 1, 2, -1)


class TestIngest:
    HEADER = ("pickup_lat", "pickup_lon", "dropoff_lat", "dropoff_lon", "pickup_unix_seconds")

    def test_empty_file(self, grid6, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        assert ingest_trip_records(p, grid6, 60).requests == []

    def test_floor_division(self, grid6, tmp_path):
        p = tmp_path / "one.csv"
        write_rows(p, ("pickup_loc", "dropoff_loc", "pickup_unix_seconds"), [(0, 5, 61)])
        (r,) = ingest_trip_records(p, grid6, 60).requests
        assert r.arrival_epoch == 1

    def test_snapping_matches_brute_force(self, grid6, tmp_path):
        rng = np.random.default_rng(2)
        lats = [c[0] for c in grid6.coords.values()]
        lons = [c[1] for c in grid6.coords.values()]
        rows = []
        for k in range(10):
            rows.append((rng.uniform(min(lats), max(lats)), rng.uniform(min(lons), max(lons)),
                         rng.uniform(min(lats), max(lats)), rng.uniform(min(lons), max(lons)), 30 * k))
        p = tmp_path / "trips.csv"
        write_rows(p, self.HEADER, rows)
        res = ingest_trip_records(p, grid6, 60)
        want = [(nearest_node(grid6, a, b), nearest_node(grid6, c, d), int(t // 60)) for a, b, c, d, t in rows]
        want = [w for w in want if w[0] != w[1]]
        assert [(r.origin, r.destination, r.arrival_epoch) for r in res.requests] == want
        assert res.same_od == 10 - len(want)

    def test_malformed_and_same_od_counted(self, grid6, tmp_path):
        p = tmp_path / "bad.csv"
        write_rows(p, ("pickup_loc", "dropoff_loc", "pickup_unix_seconds"),
                   [(0, 5, 0), ("x", 5, 0), (0, 999, 0), (4, 4, 10), (1, 2, "nan-ish")])
        res = ingest_trip_records(p, grid6, 60)
        assert len(res.requests) == 1
        assert res.malformed == 3
        assert res.same_od == 1

    def test_unreadable_file(self, grid6, tmp_path):
        with pytest.raises(ValueError, match="cannot read"):
            ingest_trip_records(tmp_path / "missing.csv", grid6, 60)

    def test_idempotent_and_round_trip(self, grid6, grid6_clusters, tmp_path):
        reqs = synthesize_demand(grid6, grid6_clusters, [3.0] * 5, seed=1)
        p = tmp_path / "paths.csv"
        write_requests(p, reqs, 60)
        a = ingest_trip_records(p, grid6, 60).requests
        b = ingest_trip_records(p, grid6, 60).requests
        assert a == b == reqs


class TestSynthesize:
    def test_zero_rate(self, grid6, grid6_clusters):
        assert synthesize_demand(grid6, grid6_clusters, [0.0] * 10, seed=0) == []

    def test_deterministic(self, grid6, grid6_clusters):
        a = synthesize_demand(grid6, grid6_clusters, [5.0] * 10, seed=3)
        assert a == synthesize_demand(grid6, grid6_clusters, [5.0] * 10, seed=3)

    def test_mean_count_near_rate(self, grid6, grid6_clusters):
        means = [len(synthesize_demand(grid6, grid6_clusters, [100.0] * 50, seed=s)) / 50 for s in range(5)]
        assert abs(np.mean(means) - 100) < 10

    def test_origin_weights_respected(self, grid6, grid6_clusters):
        w = np.zeros(grid6_clusters.K)
        w[2] = 1.0
        reqs = synthesize_demand(grid6, grid6_clusters, [20.0] * 5, seed=0, origin_weights=w)
        assert {grid6_clusters[r.origin] for r in reqs} == {2}
        assert all(r.origin != r.destination for r in reqs)


class TestEpochBatches:
    def test_empty(self):
        batches = epoch_batches([], 4)
        assert [len(b) for b in batches] == [0, 0, 0, 0]

    def test_grouping(self):
        reqs = [Request(i, 0, 1, 2) for i in range(3)]
        assert [len(b) for b in epoch_batches(reqs, 4)] == [0, 0, 3, 0]

    def test_out_of_horizon_rejected(self):
        with pytest.raises(ValueError):
            epoch_batches([Request(0, 0, 1, 5)], 5)

    def test_partition(self):
        rng = np.random.default_rng(0)
        reqs = [Request(i, 0, 1, int(rng.integers(0, 30))) for i in range(1000)]
        batches = epoch_batches(reqs, 30)
        flat = [r for b in batches for r in b.requests]
        assert sorted(flat, key=lambda r: r.id) == reqs
        assert all(r.arrival_epoch == b.epoch for b in batches for r in b.requests)


class TestFutureDemand:
    def test_geometric_fixture(self):
        F = compute_future_demand(np.ones((3, 1)), 0.5, 100)
        assert F[:, 0].tolist() == [1.75, 1.5, 1.0]

    def test_zero_discount_is_mean(self):
        g = np.random.default_rng(1).poisson(4.0, size=(3, 6, 2))
        assert_array_equal(compute_future_demand(g, 0.0, 10), g.mean(axis=0))

    def test_matches_double_loop(self):
        g = np.random.default_rng(2).poisson(3.0, size=(3, 10, 4))
        for T in (0, 3, 9, 50):
            assert_allclose(compute_future_demand(g, 0.8, T), future_demand_naive(g, 0.8, T), rtol=0, atol=1e-12)

    def test_empty_paths_rejected(self):
        with pytest.raises(ValueError):
            compute_future_demand(np.zeros((0, 5, 2)), 0.9, 3)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 20), min_size=2, max_size=2), min_size=1, max_size=12),
           st.floats(0.0, 0.99), st.integers(0, 15))
    def test_non_negative_and_dominates_current(self, rows, gamma, T):
        g = np.array(rows, dtype=float)
        F = compute_future_demand(g, gamma, T)
        assert (F >= 0).all()
        assert (F >= g - 1e-12).all()


class TestDemandStats:
    def test_csv_round_trip(self, grid6, grid6_clusters, tmp_path):
        paths = [synthesize_demand(grid6, grid6_clusters, [4.0] * 8, seed=s) for s in range(3)]
        stats = DemandStats.from_paths(paths, grid6_clusters, 8, 0.9, 8)
        stats.to_csv(tmp_path / "s.csv")
        back = DemandStats.from_csv(tmp_path / "s.csv", 0.9, 8)
        assert_array_equal(back.g, stats.g)
        assert_array_equal(back.F, stats.F)

    def test_counts_sum_to_requests(self, grid6, grid6_clusters):
        reqs = synthesize_demand(grid6, grid6_clusters, [4.0] * 8, seed=0)
        assert demand_counts(reqs, grid6_clusters, 8).sum() == len(reqs)
