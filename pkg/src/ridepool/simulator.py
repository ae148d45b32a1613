"""Epoch loop: batch -> feasible actions -> values -> scores -> ILP -> assign -> advance."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ridepool.actions import ActionSet, action_cluster, generate_feasible_actions
from ridepool.cevd import CevdParams, CondProbKernel, cevd_values
from ridepool.demand import DemandStats, EpochBatch, Request, compute_future_demand, epoch_batches
from ridepool.fleet import DelayConstraints, Vehicle, advance, best_insertion
from ridepool.matching import Assignment, AssignmentInstance, solve
from ridepool.road_network import ClusterAssignment, RoadNetwork
from ridepool.value_fn import FeatureSpec, ValueNet, action_values, featurize_actions, fleet_cluster_counts

logger = logging.getLogger(__name__)

MODES = ("myopic", "neuradp", "neuradp+", "cevd")
FULL_SCALE_TAU = (90.0, 120.0, 150.0)
FULL_SCALE_FLEET = (500, 750, 1000)
FULL_SCALE_CAPACITY = (4, 5)


@dataclass(frozen=True)
class SimConfig:
    delta: float = 60.0
    tau: float = 120.0
    capacity: int = 4
    fleet_size: int = 20
    K: int = 8
    gamma: float = 0.9
    horizon: int = 30
    return_horizon: int | None = None
    seed: int = 0
    lam: float = 0.0
    alpha: float = 0.0
    mode: str = "cevd"
    cap_combos: int | None = 50
    distance_scale: float = 60.0
    time_budget: float | None = None
    beam: int | None = None
    full_scale: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.delta > 0 and self.tau > 0):
            raise ValueError("delta and tau must be positive")
        if self.capacity <= 0 or self.fleet_size < 0 or self.K <= 0 or self.horizon < 0:
            raise ValueError("capacity, K must be positive; fleet size and horizon non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lam == -1.0:
            raise ValueError("lambda = -1 is not allowed")
        if self.full_scale:
            if self.tau not in FULL_SCALE_TAU or self.fleet_size not in FULL_SCALE_FLEET or self.capacity not in FULL_SCALE_CAPACITY:
                raise ValueError("full-scale runs use tau in {90,120,150}, |R| in {500,750,1000}, C in {4,5}")

    @property
    def constraints(self) -> DelayConstraints:
        return DelayConstraints(self.tau, self.delta)

    @property
    def solver_budget(self) -> float:
        return 0.8 * self.delta if self.time_budget is None else self.time_budget

    @property
    def scoring_gamma(self) -> float:
        return 0.0 if self.mode == "myopic" else self.gamma


@dataclass(frozen=True, eq=False)
class Scenario:
    """Static inputs shared by every episode: network, clusters and demand statistics."""

    net: RoadNetwork
    clusters: ClusterAssignment
    stats: DemandStats

    def feature_spec(self, config: SimConfig, use_future_demand: bool = True) -> FeatureSpec:
        return FeatureSpec(
            K=self.clusters.K,
            capacity=config.capacity,
            tau=config.tau,
            horizon=config.horizon,
            fleet_size=config.fleet_size,
            g_scale=self.stats.g_scale,
            F_scale=self.stats.F_scale,
            duration_scale=float(self.net.table.max()) + 3.0 * config.tau,
            use_future_demand=use_future_demand,
        )


@dataclass
class EpochMetrics:
    epoch: int
    arrived: int
    served: int
    cum_service_rate: float
    est_value: float
    realized_return: float = math.nan
    gap: float = math.nan
    solver_optimal: bool = True
    wall_ms: float = math.nan
    objective: float = 0.0


METRIC_COLUMNS = ("epoch", "arrived", "served", "cum_service_rate", "est_value", "realized_return", "gap",
                  "solver_optimal", "wall_ms")


@dataclass
class EpochDecision:
    action_sets: list[ActionSet]
    features: list[np.ndarray]
    values: list[np.ndarray]
    scores: list[np.ndarray]
    assignment: Assignment
    action_clusters: list[list[int]]
    vehicle_clusters: list[int]


@dataclass
class Episode:
    metrics: list[EpochMetrics]
    choices: list[list[tuple[int, ...]]] = field(default_factory=list)  # request ids per vehicle per epoch
    states: list[list[Vehicle]] = field(default_factory=list)

    @property
    def total_served(self) -> int:
        return sum(m.served for m in self.metrics)

    @property
    def total_objective(self) -> float:
        total = 0.0
        for m in self.metrics:
            total += m.objective
        return total


def initial_fleet(net: RoadNetwork, size: int, capacity: int, seed: int) -> list[Vehicle]:
    """Vehicles at seeded uniformly random intersections."""
    rng = np.random.default_rng(seed)
    locs = rng.choice(len(net.nodes), size=size, replace=True)
    return [Vehicle(i, capacity, net.nodes[int(k)]) for i, k in enumerate(locs)]


def current_demand(batch: EpochBatch, clusters: ClusterAssignment) -> np.ndarray:
    g = np.zeros(clusters.K)
    for r in batch.requests:
        g[clusters[r.origin]] += 1
    return g


def decide(
    vehicles: Sequence[Vehicle],
    batch: EpochBatch,
    scenario: Scenario,
    config: SimConfig,
    value_net: ValueNet | None = None,
    kernel: CondProbKernel | None = None,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> EpochDecision:
    """Build, value, score and match every vehicle's feasible actions for one epoch."""
    t = batch.epoch
    now = t * config.delta
    net, clusters = scenario.net, scenario.clusters
    constraints = config.constraints
    action_sets = [generate_feasible_actions(v, batch, net, now, constraints, config.cap_combos, config.beam)
                   for v in vehicles]
    gamma = config.scoring_gamma
    needs_values = value_net is not None and (gamma > 0.0 or config.mode != "myopic")
    if needs_values:
        spec = value_net.spec
        counts = fleet_cluster_counts(vehicles, clusters)
        g_t = current_demand(batch, clusters)
        F_t = scenario.stats.future(t)
        features = [featurize_actions(v, a.actions, counts, g_t, F_t, t, now, spec, clusters, net)
                    for v, a in zip(vehicles, action_sets)]
        values = action_values(value_net, features)
    else:
        features = [np.zeros((len(a), 0)) for a in action_sets]
        values = [np.zeros(len(a)) for a in action_sets]
    rewards = [np.array([a.reward for a in aset.actions], dtype=float) for aset in action_sets]
    vehicle_clusters = [clusters[v.location] for v in vehicles]
    action_clusters = [[action_cluster(a, clusters, v) for a in aset.actions] for v, aset in zip(vehicles, action_sets)]
    if config.mode == "cevd":
        if kernel is None:
            kernel = CondProbKernel.from_clusters(clusters, config.alpha, config.distance_scale)
        blended = cevd_values(values, action_clusters, vehicle_clusters, kernel, CevdParams(config.lam, gamma))
    else:
        blended = values
    scores = [r + gamma * v for r, v in zip(rewards, blended)]
    acting = scores
    if noise_sigma > 0.0:
        acting = [s + rng.normal(0.0, noise_sigma, size=len(s)) for s in scores]
    inst = AssignmentInstance(
        tuple(map(tuple, acting)),
        tuple(tuple(a.request_ids for a in aset.actions) for aset in action_sets),
        tuple(v.id for v in vehicles),
    )
    assignment = solve(inst, time_budget=config.solver_budget)
    if noise_sigma > 0.0:
        # report the noiseless objective of the chosen joint action
        assignment.objective = sum(float(scores[i][c]) for i, c in enumerate(assignment.choice))
    return EpochDecision(action_sets, features, values, scores, assignment, action_clusters, vehicle_clusters)


def apply_decision(vehicles: Sequence[Vehicle], decision: EpochDecision) -> list[Vehicle]:
    """Post-decision fleet: each vehicle adopts its chosen action's planned route."""
    out = []
    for v, aset, c in zip(vehicles, decision.action_sets, decision.assignment.choice):
        out.append(replace(v, route=aset.actions[c].route))
    return out


def advance_fleet(vehicles: Sequence[Vehicle], net: RoadNetwork, delta: float, now: float) -> list[Vehicle]:
    return [advance(v, net, delta, now).vehicle for v in vehicles]


def _batches(demand, horizon: int) -> list[EpochBatch]:
    if demand and isinstance(demand[0], EpochBatch):
        return list(demand)
    return epoch_batches([r for r in demand if r.arrival_epoch < horizon], horizon)


def run_episode(
    config: SimConfig,
    value_net: ValueNet | None,
    demand: Sequence[Request] | Sequence[EpochBatch],
    scenario: Scenario,
    record: bool = False,
) -> Episode:
    """Simulate ``config.horizon`` epochs from seeded initial positions.

    Requests not assigned in their arrival epoch expire.  ``served`` counts
    requests accepted into a route, which is final because deadlines are
    hard constraints that accepted routes already satisfy.
    """
    if config.mode != "myopic" and value_net is None:
        raise ValueError(f"mode {config.mode!r} needs a value network")
    batches = _batches(demand, config.horizon)
    vehicles = initial_fleet(scenario.net, config.fleet_size, config.capacity, config.seed)
    kernel = None
    if config.mode == "cevd":
        kernel = CondProbKernel.from_clusters(scenario.clusters, config.alpha, config.distance_scale)
    metrics: list[EpochMetrics] = []
    ep = Episode(metrics)
    arrived_total = served_total = 0
    for batch in batches[: config.horizon]:
        start = time.perf_counter()
        decision = decide(vehicles, batch, scenario, config, value_net, kernel)
        vehicles = apply_decision(vehicles, decision)
        elapsed = time.perf_counter() - start
        if elapsed > config.delta:
            logger.warning("epoch %d decision took %.1fs, longer than the %.0fs epoch", batch.epoch, elapsed,
                           config.delta)
        choice = decision.assignment.choice
        served = sum(decision.action_sets[i].actions[c].reward for i, c in enumerate(choice))
        est = 0.0
        for i, c in enumerate(choice):
            est += float(decision.values[i][c])
        arrived_total += len(batch)
        served_total += served
        metrics.append(EpochMetrics(
            epoch=batch.epoch,
            arrived=len(batch),
            served=served,
            cum_service_rate=served_total / arrived_total if arrived_total else 0.0,
            est_value=est,
            solver_optimal=decision.assignment.optimal,
            wall_ms=1000.0 * elapsed,
            objective=decision.assignment.objective,
        ))
        if record:
            ep.choices.append([tuple(sorted(decision.action_sets[i].actions[c].request_ids))
                               for i, c in enumerate(choice)])
            ep.states.append(list(vehicles))
        vehicles = advance_fleet(vehicles, scenario.net, config.delta, batch.epoch * config.delta)
    fill_returns(metrics, config.gamma, config.return_horizon)
    return ep


def realized_returns(served: Sequence[float], gamma: float, T: int | None = None) -> np.ndarray:
    """sum_{s=0}^{T} gamma**s * R[t+s], truncated at the end of the episode."""
    served = np.asarray(served, dtype=float)
    if len(served) == 0:
        return np.zeros(0)
    T = len(served) - 1 if T is None else T
    return compute_future_demand(served[:, None], gamma, T)[:, 0]


def fill_returns(metrics: Sequence[EpochMetrics], gamma: float, T: int | None = None) -> None:
    ret = realized_returns([m.served for m in metrics], gamma, T)
    for m, r in zip(metrics, ret):
        m.realized_return = float(r)
        m.gap = abs(m.est_value - m.realized_return)


@dataclass
class GapReport:
    epochs: np.ndarray
    estimated: np.ndarray
    realized: np.ndarray
    gap: np.ndarray

    @property
    def mean_gap(self) -> float:
        return float(self.gap.mean()) if len(self.gap) else 0.0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "estimated_value", "discounted_return", "gap"])
            for row in zip(self.epochs, self.estimated, self.realized, self.gap):
                w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def bellman_gap_report(metrics: Sequence[EpochMetrics], gamma: float, T: int | None = None) -> GapReport:
    """Per-epoch |sum of chosen-action values - realised discounted served count|."""
    est = np.array([m.est_value for m in metrics], dtype=float)
    real = realized_returns([m.served for m in metrics], gamma, T)
    return GapReport(np.array([m.epoch for m in metrics]), est, real, np.abs(est - real))


@dataclass
class RunSummary:
    runs: int
    mean_served: float
    std_served: float
    moving_average: list[float]


def aggregate_runs(runs: Mapping[str, Sequence[Sequence[EpochMetrics]]], window: int = 5) -> dict[str, RunSummary]:
    """Mean and sample standard deviation of total served per configuration, plus a
    trailing moving average of the epoch-wise mean served count."""
    if window <= 0:
        raise ValueError("window must be positive")
    out = {}
    for name, episodes in runs.items():
        if not episodes:
            raise ValueError(f"configuration {name!r} has no episodes")
        totals = np.array([sum(m.served for m in ep) for ep in episodes], dtype=float)
        std = float(totals.std(ddof=1)) if len(totals) > 1 else 0.0
        n = min(len(ep) for ep in episodes)
        per_epoch = np.array([[m.served for m in ep[:n]] for ep in episodes], dtype=float).mean(axis=0)
        csum = np.concatenate([[0.0], np.cumsum(per_epoch)])
        ma = [(csum[t + 1] - csum[max(0, t + 1 - window)]) / min(window, t + 1) for t in range(n)]
        out[name] = RunSummary(len(episodes), float(totals.mean()), std, ma)
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_metrics_csv(path: str | Path, metrics: Sequence[EpochMetrics], include_wall_time: bool = False) -> None:
    """Metrics CSV.  Wall time is left blank unless requested so that replays are byte-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            row = [getattr(m, c) for c in METRIC_COLUMNS]
            if not include_wall_time:
                row[-1] = math.nan
            w.writerow([_fmt(v) for v in row])


def read_metrics_csv(path: str | Path) -> list[EpochMetrics]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append(EpochMetrics(
                epoch=int(r["epoch"]),
                arrived=int(r["arrived"]),
                served=int(r["served"]),
                cum_service_rate=float(r["cum_service_rate"]),
                est_value=float(r["est_value"]),
                realized_return=float(r["realized_return"] or "nan"),
                gap=float(r["gap"] or "nan"),
                solver_optimal=r["solver_optimal"] == "1",
                wall_ms=float(r["wall_ms"] or "nan"),
            ))
    return out


def replay_episode(config: SimConfig, demand, scenario: Scenario, choices: Sequence[Sequence[tuple[int, ...]]]):
    """Re-apply a logged sequence of joint actions and return the post-decision fleet of each epoch."""
    batches = _batches(demand, config.horizon)
    vehicles = initial_fleet(scenario.net, config.fleet_size, config.capacity, config.seed)
    states = []
    for batch, joint in zip(batches, choices):
        now = batch.epoch * config.delta
        by_id = {r.id: r for r in batch.requests}
        post = []
        for v, rids in zip(vehicles, joint):
            ins = best_insertion(v, [by_id[r] for r in rids], scenario.net, now, config.constraints, config.beam)
            if ins is None:
                raise ValueError(f"logged action for vehicle {v.id} at epoch {batch.epoch} is infeasible")
            post.append(replace(v, route=ins.route))
        states.append(post)
        vehicles = advance_fleet(post, scenario.net, config.delta, now)
    return states
