import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ridepool.actions import generate_feasible_actions
from ridepool.demand import Request
from ridepool.fleet import DelayConstraints, Vehicle
from ridepool.oracles import gradient_relative_error, numeric_gradients, random_net
from ridepool.simulator import run_episode
from ridepool.training import TrainConfig, new_value_net, train
from ridepool.value_fn import (
    SLACK_PAD,
    Adam,
    Experience,
    FeatureSpec,
    ReplayMemory,
    ValueNet,
    default_solver,
    evaluate,
    experience_targets,
    featurize_actions,
    softplus,
    train_step,
)

E = frozenset()


def toy_experience(rng, n_in=6, nv=3, terminal=False):
    feats, rewards, reqs = [], [], []
    for i in range(nv):
        na = int(rng.integers(1, 4))
        feats.append(rng.normal(size=(na, n_in)))
        rewards.append(np.arange(na, dtype=float))
        reqs.append([E] + [frozenset({10 * i + a}) for a in range(1, na)])
    return Experience(feats, rewards, reqs, epoch=0, terminal=terminal)


class TestFeatures:
    @pytest.fixture
    def spec(self):
        return FeatureSpec(K=4, capacity=3, tau=120.0, horizon=10, fleet_size=5)

    def test_length(self, spec):
        assert spec.length == 4 * 4 + 3 + 4

    def test_idle_vehicle(self, grid6, grid6_clusters, spec):
        v = Vehicle(0, 3, 8)
        null = generate_feasible_actions(v, [], grid6, 0.0, DelayConstraints(120.0))[0]
        counts = np.array([2.0, 1.0, 1.0, 1.0])
        X = featurize_actions(v, [null], counts, np.zeros(4), np.zeros(4), 0, 0.0, spec, grid6_clusters, grid6)[0]
        K = 4
        assert X[grid6_clusters[8]] == 1.0 and X[:K].sum() == 1.0
        assert X[K] == 1.0
        assert_array_equal(X[K + 1:K + 4], [SLACK_PAD] * 3)
        assert X[-1] == 0.0

    def test_deterministic_and_sorted_slacks(self, grid6, grid6_clusters, spec):
        v = Vehicle(0, 3, 0)
        reqs = [Request(0, 1, 30, 0), Request(1, 6, 35, 0)]
        actions = generate_feasible_actions(v, reqs, grid6, 0.0, DelayConstraints(600.0)).actions
        args = (np.ones(4), np.arange(4.0), np.ones(4), 3, 0.0, spec, grid6_clusters, grid6)
        X1 = featurize_actions(v, actions, *args)
        X2 = featurize_actions(v, actions, *args)
        assert_array_equal(X1, X2)
        two = [k for k, a in enumerate(actions) if len(a.request_ids) == 2][0]
        slacks = X1[two, 5:8]
        assert slacks[2] == SLACK_PAD and slacks[0] <= slacks[1]
        assert X1[two, 4] == pytest.approx(1 / 3)

    def test_future_block_switch(self, grid6, grid6_clusters):
        off = FeatureSpec(K=4, capacity=3, tau=120.0, horizon=10, fleet_size=5, use_future_demand=False)
        v = Vehicle(0, 3, 0)
        null = generate_feasible_actions(v, [], grid6, 0.0, DelayConstraints(120.0)).actions
        X = featurize_actions(v, null, np.ones(4), np.ones(4), np.full(4, 7.0), 0, 0.0, off, grid6_clusters, grid6)
        assert_array_equal(X[0, -5:-1], 0.0)


class TestValueNet:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            net, X, y = random_net(rng)
            assert gradient_relative_error(net, X, y) < 1e-4

    def test_linear_output_gradients(self):
        rng = np.random.default_rng(1)
        net = ValueNet(5, (4, 3), "tanh", "linear", seed=2)
        X, y = rng.normal(size=(7, 5)), rng.normal(size=7)
        _, analytic = net.loss_and_grad(X, y)
        for a, n in zip(analytic, numeric_gradients(net, X, y)):
            assert_allclose(a, n, rtol=1e-5, atol=1e-8)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6), st.integers(0, 50))
    def test_positive_output(self, x, seed):
        net = ValueNet(6, (8, 8), seed=seed)
        net.params[-1][:] = -1e4
        assert evaluate(net, np.array(x)) > 0

    def test_zero_final_layer(self):
        net = ValueNet(4, (5, 5), seed=3)
        net.params[-2][:] = 0.0
        net.params[-1][:] = 0.25
        out = net(np.random.default_rng(0).normal(size=(9, 4)))
        assert_array_equal(out, np.full(9, softplus(0.25)))

    def test_batch_equals_loop(self):
        net = ValueNet(10, seed=4)
        X = np.random.default_rng(1).normal(size=(32, 10))
        assert_allclose(net(X), [net(x) for x in X], rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="length 4"):
            ValueNet(4)(np.zeros(5))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ValueNet(4, activation="gelu")
        with pytest.raises(ValueError):
            ValueNet(4, output="exp")

    def test_checkpoint_bit_exact(self, tmp_path):
        spec = FeatureSpec(K=2, capacity=2, tau=90.0, horizon=5, fleet_size=3, g_scale=1.7)
        net = ValueNet(spec.length, (6, 4), seed=5, spec=spec)
        for p in net.params:
            p += np.random.default_rng(0).normal(size=p.shape) / 3
        net.save(tmp_path / "m.json")
        back = ValueNet.load(tmp_path / "m.json")
        for a, b in zip(net.params, back.params):
            assert a.tobytes() == b.tobytes()
        assert back.spec == spec

    def test_checkpoint_version_checked(self):
        d = ValueNet(3).to_dict()
        d["version"] = 99
        with pytest.raises(ValueError, match="version"):
            ValueNet.from_dict(d)


class TestReplay:
    def test_fifo_and_bound(self):
        mem = ReplayMemory(3)
        rng = np.random.default_rng(0)
        exps = [toy_experience(rng) for _ in range(5)]
        for e in exps:
            mem.add(e)
            assert len(mem) <= 3
        assert list(mem) == exps[2:]

    def test_sample_seeded(self):
        rng = np.random.default_rng(0)
        exps = [toy_experience(rng) for _ in range(10)]
        a, b = ReplayMemory(10, seed=3), ReplayMemory(10, seed=3)
        for e in exps:
            a.add(e)
            b.add(e)
        assert [id(x) for x in a.sample(4)] == [id(x) for x in b.sample(4)]
        assert len(a.sample(50)) == 10

    def test_capacity_positive(self):
        with pytest.raises(ValueError):
            ReplayMemory(0)


class TestTrainStep:
    def test_gamma_zero_targets_are_rewards(self):
        rng = np.random.default_rng(0)
        exp = toy_experience(rng)
        y = experience_targets(ValueNet(6, seed=1), exp, default_solver, 0.0)
        assert_array_equal(y, [r.max() for r in exp.rewards])

    def test_stored_choice(self):
        exp = toy_experience(np.random.default_rng(1))
        exp.choice = [0] * len(exp.features)
        net = ValueNet(6, seed=0)
        y = experience_targets(net, exp, None, 0.5)
        assert_allclose(y, [0.5 * net(f[0]) for f in exp.features], rtol=1e-15)
        exp.choice = None
        with pytest.raises(ValueError):
            experience_targets(net, exp, None, 0.5)

    def test_terminal_drops_future(self):
        exp = toy_experience(np.random.default_rng(2), terminal=True)
        exp.choice = [len(f) - 1 for f in exp.features]
        y = experience_targets(ValueNet(6), exp, None, 0.9)
        assert_array_equal(y, [r[-1] for r in exp.rewards])

    def test_zero_learning_rate(self):
        net = ValueNet(6, seed=2)
        before = [p.copy() for p in net.params]
        train_step(net, [toy_experience(np.random.default_rng(3))], default_solver, 0.9, 0.0)
        for a, b in zip(before, net.params):
            assert_array_equal(a, b)

    def test_overfit_single_experience(self):
        net = ValueNet(6, (16, 16), seed=0)
        exp = toy_experience(np.random.default_rng(4), nv=4)
        opt = Adam(net.params)
        first = train_step(net, [exp], default_solver, 0.0, 1e-2, optimizer=opt)
        for _ in range(199):
            last = train_step(net, [exp], default_solver, 0.0, 1e-2, optimizer=opt)
        assert last <= 0.5 * first

    def test_regresses_previous_post_decision_state(self):
        rng = np.random.default_rng(5)
        exp = toy_experience(rng)
        exp.inputs = rng.normal(size=(3, 6))
        exp.choice = [0, 0, 0]
        net = ValueNet(6, seed=1)
        loss = train_step(net.copy(), [exp], None, 0.0, 0.0)
        y = [r[0] for r in exp.rewards]
        assert loss == pytest.approx(np.mean((net(exp.inputs) - y) ** 2), rel=1e-12)
        with pytest.raises(ValueError):
            Experience(exp.features, exp.rewards, exp.requests, 0, inputs=np.zeros((2, 6)))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(ValueNet(6), [], None, 0.9, 1e-3)


class TestTrain:
    def test_zero_episodes(self, toy):
        config, scenario, sampler = toy
        init = new_value_net(scenario, config, TrainConfig(seed=7))
        out = train(scenario, config, [], TrainConfig(episodes=0, seed=7))
        for a, b in zip(init.params, out.params):
            assert_array_equal(a, b)

    def test_deterministic(self, toy):
        config, scenario, sampler = toy
        cfg = TrainConfig(episodes=3, noise_sigma=0.0, seed=2)
        paths = [sampler(s) for s in range(3)]
        a = train(scenario, config, paths, cfg)
        b = train(scenario, config, paths, cfg)
        for x, y in zip(a.params, b.params):
            assert x.tobytes() == y.tobytes()

    def test_needs_paths(self, toy):
        config, scenario, _ = toy
        with pytest.raises(ValueError):
            train(scenario, config, [], TrainConfig(episodes=1))

    def test_trained_policy_not_worse_than_myopic(self):
        from dataclasses import replace

        from ridepool.experiments import DemandModel, build_scenario
        from ridepool.simulator import SimConfig

        config = SimConfig(fleet_size=5, K=3, horizon=12, tau=120.0, capacity=3, mode="neuradp+")
        scenario, sampler = build_scenario(3, 3, config, DemandModel(base_rate=4, peak_rate=8), city_seed=2,
                                           stats_paths=10)
        net = train(scenario, config, [sampler(s) for s in range(50)], TrainConfig(episodes=50, seed=0))
        adp, myopic = [], []
        for s in range(5):
            demand = sampler(500 + s)
            adp.append(run_episode(replace(config, seed=900 + s), net, demand, scenario).total_served)
            myopic.append(run_episode(replace(config, seed=900 + s, mode="myopic"), None, demand,
                                      scenario).total_served)
        assert np.mean(adp) >= np.mean(myopic)
