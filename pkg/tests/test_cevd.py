import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ridepool.cevd import (
    CevdParams,
    CondProbKernel,
    cevd_value,
    cevd_values,
    conditional_probs,
    dump_scores_csv,
    score_all,
)


def random_tables(rng, n=6, K=4, max_actions=4):
    values = [rng.normal(size=int(rng.integers(1, max_actions + 1))) for _ in range(n)]
    action_clusters = [rng.integers(0, K, size=len(v)).tolist() for v in values]
    vehicle_clusters = rng.integers(0, K, size=n).tolist()
    D = rng.uniform(0, 600, size=(K, K))
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return values, action_clusters, vehicle_clusters, D


class TestKernel:
    def test_symmetric_when_distance_symmetric(self):
        _, _, _, D = random_tables(np.random.default_rng(0))
        k = CondProbKernel(-0.7, D)
        assert_allclose(k.W, k.W.T, rtol=1e-15)

    def test_overflow_rejected(self):
        with pytest.raises(ValueError, match="alpha"):
            CondProbKernel(10.0, np.full((2, 2), 1e6), scale=1.0)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            CondProbKernel(0.0, np.zeros((2, 3)))

    def test_params_reject_minus_one(self):
        with pytest.raises(ValueError):
            CevdParams(lam=-1.0)
        with pytest.raises(ValueError):
            CevdParams(lam=math.inf)


class TestConditionalProbs:
    def test_alpha_zero_uniform(self):
        k = CondProbKernel(0.0, np.arange(9.0).reshape(3, 3))
        assert_array_equal(conditional_probs(k, 1, [0, 2, 2, 1]), [0.25] * 4)

    def test_single_action(self):
        k = CondProbKernel(-2.0, np.ones((3, 3)))
        assert_array_equal(conditional_probs(k, 0, [2]), [1.0])

    def test_hand_softmax(self):
        D = np.array([[0.0, 100.0, 300.0], [100.0, 0.0, 200.0], [300.0, 200.0, 0.0]])
        k = CondProbKernel(-1.0, D, scale=1.0)
        w = [math.exp(-0.0), math.exp(-100.0), math.exp(-300.0)]
        want = [x / sum(w) for x in w]
        assert_allclose(conditional_probs(k, 0, [0, 1, 2]), want, rtol=1e-12)

    def test_minute_scale(self):
        D = np.array([[0.0, 60.0], [60.0, 0.0]])
        p = conditional_probs(CondProbKernel(-1.0, D), 0, [0, 1])
        assert_allclose(p, [1 / (1 + math.exp(-1)), math.exp(-1) / (1 + math.exp(-1))], rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            conditional_probs(CondProbKernel(0.0, np.zeros((2, 2))), 0, [])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.integers(0, 1000))
    def test_distribution(self, alpha, seed):
        rng = np.random.default_rng(seed)
        _, _, _, D = random_tables(rng)
        k = CondProbKernel(alpha, D)
        p = conditional_probs(k, int(rng.integers(0, 4)), rng.integers(0, 4, size=int(rng.integers(1, 9))))
        assert abs(p.sum() - 1.0) < 1e-9
        assert (p > 0).all()


class TestCevdValue:
    def test_lambda_zero_identity(self):
        values, ac, vc, D = random_tables(np.random.default_rng(1), n=10, K=2)
        k = CondProbKernel(-0.5, D)
        out = cevd_values(values, ac, vc, k, CevdParams(0.0))
        for a, b in zip(out, values):
            assert_array_equal(a, b)

    def test_alone_in_cluster(self):
        values = [np.array([1.0, 2.0]), np.array([3.0])]
        k = CondProbKernel(0.0, np.zeros((2, 2)))
        out = cevd_values(values, [[0, 1], [1]], [0, 1], k, CevdParams(0.7))
        assert_array_equal(out[0], values[0])
        assert cevd_value(1, 0, values, [[0, 1], [1]], [0, 1], k, CevdParams(0.7)) == 3.0

    def test_hand_expansion(self):
        # three vehicles in one cluster, two actions each, uniform conditional probabilities
        V = [[1.0, 4.0], [2.0, 6.0], [0.0, 10.0]]
        ac = [[0, 1], [0, 1], [1, 0]]
        k = CondProbKernel(0.0, np.array([[0.0, 90.0], [90.0, 0.0]]))
        lam = 0.5
        means = [np.mean(v) for v in V]
        for i in range(3):
            others = [means[j] for j in range(3) if j != i]
            for f in range(2):
                want = (V[i][f] + lam * sum(others) / 2) / (1 + lam)
                assert cevd_value(i, f, V, ac, [0, 0, 0], k, CevdParams(lam)) == pytest.approx(want, rel=1e-14)

    def test_vectorised_matches_direct(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            values, ac, vc, D = random_tables(rng, n=8, K=3)
            k = CondProbKernel(float(rng.uniform(-3, 3)), D)
            params = CevdParams(float(rng.uniform(-0.9, 0.9)))
            fast = cevd_values(values, ac, vc, k, params)
            for i, row in enumerate(fast):
                for f, x in enumerate(row):
                    assert x == pytest.approx(cevd_value(i, f, values, ac, vc, k, params), rel=1e-10, abs=1e-12)

    def test_scaling(self):
        rng = np.random.default_rng(3)
        values, ac, vc, D = random_tables(rng, n=7, K=2)
        k, params = CondProbKernel(-1.3, D), CevdParams(0.4)
        base = cevd_values(values, ac, vc, k, params)
        scaled = cevd_values([3.5 * v for v in values], ac, vc, k, params)
        for a, b in zip(base, scaled):
            assert_allclose(b, 3.5 * a, rtol=1e-12)

    def test_shape_mismatch(self):
        k = CondProbKernel(0.0, np.zeros((2, 2)))
        with pytest.raises(ValueError):
            cevd_values([[1.0, 2.0]], [[0]], [0], k, CevdParams(0.1))
        with pytest.raises(ValueError):
            cevd_values([[1.0]], [[0]], [0, 1], k, CevdParams(0.1))


class TestScoreAll:
    def test_gamma_zero(self):
        values, ac, vc, D = random_tables(np.random.default_rng(4))
        rewards = [np.arange(len(v), dtype=float) for v in values]
        scores, _ = score_all(rewards, values, ac, vc, CondProbKernel(-1.0, D), CevdParams(0.6, gamma=0.0))
        for s, r in zip(scores, rewards):
            assert_array_equal(s, r)

    def test_lambda_zero_matches_plain_scoring(self):
        values, ac, vc, D = random_tables(np.random.default_rng(5))
        rewards = [np.ones(len(v)) for v in values]
        scores, _ = score_all(rewards, values, ac, vc, CondProbKernel(2.0, D), CevdParams(0.0, 0.9))
        for s, r, v in zip(scores, rewards, values):
            assert_array_equal(s, r + 0.9 * v)

    def test_recomputation(self):
        rng = np.random.default_rng(6)
        values, ac, vc, D = random_tables(rng, n=4, K=2)
        rewards = [rng.integers(0, 3, size=len(v)).astype(float) for v in values]
        k, params = CondProbKernel(-0.4, D), CevdParams(0.3, 0.95)
        scores, vhat = score_all(rewards, values, ac, vc, k, params)
        for i in range(4):
            for f in range(len(values[i])):
                want = rewards[i][f] + 0.95 * cevd_value(i, f, values, ac, vc, k, params)
                assert scores[i][f] == pytest.approx(want, rel=1e-12)

    def test_missing_value_rejected(self):
        k = CondProbKernel(0.0, np.zeros((1, 1)))
        with pytest.raises(ValueError):
            score_all([[0.0, 1.0]], [[0.0]], [[0]], [0], k, CevdParams())

    def test_dump(self, tmp_path):
        values, ac, vc, D = random_tables(np.random.default_rng(7), n=2)
        rewards = [np.zeros(len(v)) for v in values]
        scores, vhat = score_all(rewards, values, ac, vc, CondProbKernel(0.0, D), CevdParams(0.2))
        dump_scores_csv(tmp_path / "s.csv", [10, 11], rewards, values, vhat, scores)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "vehicle,action_index,J,V,Vhat,score"
        assert len(lines) == 1 + sum(len(v) for v in values)
        assert float(lines[1].split(",")[5]) == scores[0][0]
