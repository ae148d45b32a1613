"""Desk-scale scenario builders shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ridepool.demand import DemandStats, Request, synthesize_demand
from ridepool.road_network import cluster_intersections, generate_grid_city
from ridepool.simulator import Scenario, SimConfig


@dataclass(frozen=True)
class DemandModel:
    """Poisson demand with a single peak and hot-spot origin clusters."""

    base_rate: float = 6.0
    peak_rate: float = 12.0
    peak_epoch: float = 0.5  # as a fraction of the horizon
    peak_width: float = 0.2
    hotspots: int = 2
    hotspot_weight: float = 4.0

    def rates(self, horizon: int) -> list[float]:
        t = np.arange(horizon) / max(horizon - 1, 1)
        bump = np.exp(-0.5 * ((t - self.peak_epoch) / self.peak_width) ** 2)
        return list(self.base_rate + (self.peak_rate - self.base_rate) * bump)

    def origin_weights(self, K: int, seed: int) -> np.ndarray:
        w = np.ones(K)
        hot = np.random.default_rng(seed).choice(K, size=min(self.hotspots, K), replace=False)
        w[hot] = self.hotspot_weight
        return w


def build_scenario(rows: int, cols: int, config: SimConfig, demand: DemandModel = DemandModel(),
                   city_seed: int = 0, stats_paths: int = 20, edge_time: float = 60.0):
    """Grid city, clusters and demand statistics; returns (scenario, sampler).

    ``sampler(seed)`` draws one demand path from the same model, so training,
    validation and test paths only differ in their seeds.
    """
    net = generate_grid_city(rows, cols, edge_time, seed=city_seed)
    clusters = cluster_intersections(net, config.K, seed=city_seed)
    rates = demand.rates(config.horizon)
    weights = demand.origin_weights(clusters.K, city_seed)

    def sampler(seed: int) -> list[Request]:
        return synthesize_demand(net, clusters, rates, seed, origin_weights=weights)

    T = config.horizon if config.return_horizon is None else config.return_horizon
    paths = [sampler(10_000 + s) for s in range(stats_paths)]
    stats = DemandStats.from_paths(paths, clusters, config.horizon, config.gamma, T)
    return Scenario(net, clusters, stats), sampler


def sample_paths(sampler, seeds: Sequence[int]) -> list[list[Request]]:
    return [sampler(s) for s in seeds]
