"""Acceptance criteria, one test each; every test prints a single pass/fail line."""

import json
from dataclasses import replace

import numpy as np
import pytest

from ridepool.calibration import calibrate, validation_objective
from ridepool.cevd import CondProbKernel, conditional_probs
from ridepool.cli import main
from ridepool.demand import compute_future_demand
from ridepool.experiments import DemandModel, build_scenario, sample_paths
from ridepool.oracles import (
    check_actions,
    check_solver,
    future_demand_naive,
    gradient_relative_error,
    random_action_scenario,
    random_instance,
    random_net,
)
from ridepool.simulator import (
    SimConfig,
    _batches,
    advance_fleet,
    apply_decision,
    bellman_gap_report,
    decide,
    initial_fleet,
    run_episode,
)
from ridepool.training import TrainConfig, new_value_net, train
from ridepool.value_fn import ValueNet, evaluate

DESK = SimConfig(tau=90.0, capacity=4, fleet_size=30, K=10, gamma=0.9, horizon=30)
DESK_DEMAND = DemandModel(base_rate=10, peak_rate=20)


def test_criterion_01_reduction_identity(report):
    score_mismatch = served_mismatch = 0
    for s in range(10):
        config = SimConfig(fleet_size=6, K=4, horizon=10, capacity=3, seed=s)
        scenario, sampler = build_scenario(4, 4, config, DemandModel(base_rate=4, peak_rate=8), city_seed=s,
                                           stats_paths=4)
        net = train(scenario, config, [sampler(100 + s)], TrainConfig(episodes=2, seed=s))
        plus = replace(config, mode="neuradp+")
        cevd = replace(config, mode="cevd", lam=0.0, alpha=0.0)
        demand = sampler(s)
        va = vb = initial_fleet(scenario.net, config.fleet_size, config.capacity, s)
        for batch in _batches(demand, config.horizon):
            da, db = decide(va, batch, scenario, plus, net), decide(vb, batch, scenario, cevd, net)
            if any(a.tobytes() != b.tobytes() for a, b in zip(da.scores, db.scores)):
                score_mismatch += 1
            now = batch.epoch * config.delta
            va = advance_fleet(apply_decision(va, da), scenario.net, config.delta, now)
            vb = advance_fleet(apply_decision(vb, db), scenario.net, config.delta, now)
        a = run_episode(plus, net, demand, scenario)
        b = run_episode(cevd, net, demand, scenario)
        served_mismatch += [m.served for m in a.metrics] != [m.served for m in b.metrics]
    ok = score_mismatch == 0 and served_mismatch == 0
    report(1, ok, f"10 scenarios; epochs with differing score tables {score_mismatch}, "
                  f"scenarios with differing served series {served_mismatch}")
    assert ok


def test_criterion_02_probability_normalisation(report):
    rng = np.random.default_rng(2)
    worst_sum, min_p = 0.0, np.inf
    for _ in range(10_000):
        K = int(rng.integers(1, 8))
        D = rng.uniform(0.0, 1800.0, size=(K, K))
        np.fill_diagonal(D, 0.0)
        kernel = CondProbKernel(float(rng.uniform(-10.0, 10.0)), D)
        p = conditional_probs(kernel, int(rng.integers(0, K)), rng.integers(0, K, size=int(rng.integers(1, 12))))
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
        min_p = min(min_p, p.min())
    ok = worst_sum <= 1e-9 and min_p > 0
    report(2, ok, f"10000 draws; max |sum - 1| = {worst_sum:.2e}, min p = {min_p:.2e}")
    assert ok


def test_criterion_03_ilp_exactness(report):
    rng = np.random.default_rng(3)
    bad = [p for _ in range(500) for p in check_solver(random_instance(rng))]
    report(3, not bad, f"500 instances vs exhaustive enumeration; {len(bad)} problems")
    assert not bad, bad[:5]


def test_criterion_04_action_completeness(report):
    rng = np.random.default_rng(4)
    bad = [p for _ in range(100) for p in check_actions(*random_action_scenario(rng, max_requests=5))]
    report(4, not bad, f"100 scenarios vs powerset oracle and delay validator; {len(bad)} problems")
    assert not bad, bad[:5]


def test_criterion_05_gradients(report):
    rng = np.random.default_rng(5)
    worst = max(gradient_relative_error(*random_net(rng)) for _ in range(20))
    ok = worst < 1e-4
    report(5, ok, f"20 random nets; max relative error {worst:.2e}")
    assert ok


def test_criterion_06_positivity(report):
    rng = np.random.default_rng(6)
    lowest = np.inf
    for k in range(100):
        net = ValueNet(12, (16, 16), activation=("relu", "tanh")[k % 2], seed=k)
        net.params[-1] += rng.normal(0.0, 50.0)
        net.params[-2] *= rng.uniform(1.0, 100.0)
        X = rng.normal(0.0, 10.0 ** rng.uniform(0, 6), size=(100, 12))
        lowest = min(lowest, float(evaluate(net, X).min()))
    ok = lowest > 0
    report(6, ok, f"10000 evaluations; smallest value {lowest:.3e}")
    assert ok


def test_criterion_07_future_demand(report):
    fixture = compute_future_demand(np.ones((3, 1)), 0.5, 100)[:, 0].tolist()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        g = rng.poisson(5.0, size=(int(rng.integers(1, 5)), int(rng.integers(1, 40)), int(rng.integers(1, 6))))
        gamma, T = float(rng.uniform(0, 0.99)), int(rng.integers(0, 50))
        worst = max(worst, float(np.abs(compute_future_demand(g, gamma, T) - future_demand_naive(g, gamma, T)).max()))
    ok = fixture == [1.75, 1.5, 1.0] and worst <= 1e-12
    report(7, ok, f"fixture {fixture}; 50 random fixtures, max deviation {worst:.1e}")
    assert ok


def test_criterion_08_bellman_gap(report):
    config = SimConfig(tau=120.0, capacity=4, fleet_size=20, K=8, gamma=0.9, horizon=30)
    scenario, sampler = build_scenario(8, 8, config)
    gaps = {"neuradp": [], "neuradp+": []}
    for seed in range(5):
        paths = sample_paths(sampler, range(100 * seed, 100 * seed + 100))
        for variant in gaps:
            net = train(scenario, config, paths, TrainConfig(episodes=100, seed=seed), variant=variant)
            ep = run_episode(replace(config, mode=variant, seed=500 + seed), net, sampler(5000 + seed), scenario)
            gaps[variant].append(bellman_gap_report(ep.metrics, config.gamma).mean_gap)
    plain, plus = np.mean(gaps["neuradp"]), np.mean(gaps["neuradp+"])
    ok = plus < plain
    report(8, ok, f"8x8 city, 20 vehicles, 100 episodes, 5 seeds; mean gap neuradp+ {plus:.3f} "
                  f"vs neuradp {plain:.3f}")
    assert ok


@pytest.fixture(scope="module")
def desk():
    """10x10 city, 30 vehicles, trained network and staged calibration on three validation paths."""
    scenario, sampler = build_scenario(10, 10, DESK, DESK_DEMAND)
    net = train(scenario, DESK, sample_paths(sampler, range(100)), TrainConfig(episodes=100))
    validation = sample_paths(sampler, range(1000, 1003))
    cal = calibrate(scenario, replace(DESK, mode="cevd"), net, validation)
    return scenario, sampler, net, validation, cal


def test_criterion_09_desk_scale_improvement(report, desk):
    scenario, sampler, net, _, cal = desk
    lam, alpha = cal.params
    modes = {
        "myopic": (replace(DESK, mode="myopic"), None),
        "neuradp+": (replace(DESK, mode="neuradp+"), net),
        "cevd": (replace(DESK, mode="cevd", lam=lam, alpha=alpha), net),
    }
    served = {}
    for name, (config, model) in modes.items():
        served[name] = np.mean([run_episode(replace(config, seed=3000 + s), model, sampler(2000 + s),
                                            scenario).total_served for s in range(5)])
    ok = served["cevd"] > served["myopic"] and served["cevd"] >= served["neuradp+"]
    report(9, ok, f"10x10 city, 30 vehicles, tau 90 s, lambda* {lam:.3f}, alpha* {alpha:.3f}; mean served "
                  f"cevd {served['cevd']:.1f}, myopic {served['myopic']:.1f}, neuradp+ {served['neuradp+']:.1f}")
    assert ok


def test_criterion_10_calibration_monotonicity(report, desk):
    scenario, _, net, validation, cal = desk
    lam, alpha = cal.params
    base = validation_objective(scenario, replace(DESK, mode="cevd", lam=0.0, alpha=0.0), net, validation)
    final = validation_objective(scenario, replace(DESK, mode="cevd", lam=lam, alpha=alpha), net, validation)
    ok = final >= base and cal.lam.objective_of(0.0) == base
    report(10, ok, f"validation served at (lambda*, alpha*) {final:.0f} vs origin {base:.0f}")
    assert ok


def test_criterion_11_epoch_budget(report):
    config = SimConfig(tau=120.0, capacity=4, fleet_size=50, K=10, horizon=10, mode="cevd", lam=0.3, alpha=-1.0)
    scenario, sampler = build_scenario(20, 20, config, DemandModel(base_rate=200, peak_rate=200), stats_paths=2)
    net = new_value_net(scenario, config, TrainConfig())
    ep = run_episode(config, net, sampler(1), scenario)
    worst = max(m.wall_ms for m in ep.metrics)
    timeouts = sum(not m.solver_optimal for m in ep.metrics)
    arrived = np.mean([m.arrived for m in ep.metrics])
    ok = worst < 1000.0
    report(11, ok, f"20x20 city, 50 vehicles, {arrived:.0f} requests/epoch; slowest epoch {worst:.0f} ms, "
                   f"solver timeouts {timeouts}")
    assert ok


def test_criterion_12_manifest_replay(report, tmp_path):
    ws = str(tmp_path)
    steps = [
        ["gen-city", "--rows", "5", "--cols", "5", "--K", "4", "--set", "horizon=12", "--set", "fleet_size=6"],
        ["gen-demand", "--paths", "3", "--stats", "demand_stats.csv", "--set", "horizon=12"],
        ["train", "--demand", "demand/path_000.csv", "demand/path_001.csv", "--episodes", "3",
         "--set", "horizon=12", "--set", "fleet_size=6"],
        ["calibrate", "--demand", "demand/path_001.csv", "--lambda-samples", "3", "--alpha-samples", "3",
         "--set", "horizon=12", "--set", "fleet_size=6"],
        ["simulate", "--mode", "cevd", "--model", "model.json", "--calibration", "calibration.csv",
         "--demand", "demand/path_002.csv", "--set", "horizon=12", "--set", "fleet_size=6", "--out", "runs/m.csv"],
        ["simulate", "--replay", "runs/m.manifest.json", "--out", "runs/replay.csv"],
    ]
    codes = [main(["--workspace", ws, *argv]) for argv in steps]
    original = (tmp_path / "runs/m.csv").read_bytes()
    replayed = (tmp_path / "runs/replay.csv").read_bytes()
    manifest = json.loads((tmp_path / "runs/m.manifest.json").read_text())
    ok = codes == [0] * len(steps) and original == replayed
    report(12, ok, f"cevd run with lambda {manifest['config']['lam']:.3f} replayed from its manifest; "
                   f"{len(original)} bytes, identical={original == replayed}")
    assert ok
