"""Staged search of the neighbour weight lambda (alpha = 0), then of the kernel exponent alpha."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ridepool.demand import Request
from ridepool.simulator import Scenario, SimConfig, run_episode
from ridepool.value_fn import ValueNet

LAMBDA_RANGE = (-1.0, 1.0)  # open interval
ALPHA_RANGE = (-10.0, 10.0)  # closed interval
CRITERIA = ("served", "ilp")


@dataclass
class SearchResult:
    stage: str
    best: float
    records: list[tuple[float, float, int]] = field(default_factory=list)  # (value, objective, seed)

    def objective_of(self, value: float) -> float:
        for v, obj, _ in self.records:
            if v == value:
                return obj
        raise KeyError(value)


def validation_objective(scenario: Scenario, config: SimConfig, net: ValueNet,
                         paths: Sequence[Sequence[Request]], criterion: str = "served") -> float:
    """Sum over validation episodes of requests served (or of the per-epoch ILP objective)."""
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    total = 0.0
    for path in paths:
        ep = run_episode(config, net, path, scenario)
        total += ep.total_objective if criterion == "ilp" else float(ep.total_served)
    return total


def _sample(rng: np.random.Generator, n: int, lo: float, hi: float, open_interval: bool) -> list[float]:
    vals = []
    while len(vals) < n:
        x = float(rng.uniform(lo, hi))
        if open_interval and x == lo:
            continue
        vals.append(x)
    return vals


def _pick(records: Sequence[tuple[float, float, int]]) -> float:
    # maximum objective; ties go to the value closest to 0, then the smaller value
    return min(records, key=lambda r: (-r[1], abs(r[0]), r[0]))[0]


def _search(stage: str, values: Sequence[float], make_config, scenario, net, paths, seed, criterion) -> SearchResult:
    candidates = sorted(set([0.0, *map(float, values)]))
    records = []
    for v in candidates:
        obj = validation_objective(scenario, make_config(v), net, paths, criterion)
        records.append((v, obj, seed))
    return SearchResult(stage, _pick(records), records)


def search_lambda(scenario: Scenario, config: SimConfig, net: ValueNet, paths: Sequence[Sequence[Request]],
                  samples: int = 11, seed: int = 0, values: Sequence[float] | None = None,
                  criterion: str = "served") -> SearchResult:
    """Linear search of lambda with alpha fixed to 0; 0 is always among the candidates."""
    if values is None:
        if samples <= 0:
            raise ValueError("need at least one sample")
        values = _sample(np.random.default_rng(seed), samples, *LAMBDA_RANGE, open_interval=True)
    elif len(values) == 0:
        raise ValueError("need at least one sample")
    if any(not -1.0 < v < 1.0 for v in values):
        raise ValueError("lambda candidates must lie in (-1, 1)")
    base = replace(config, mode="cevd", alpha=0.0)
    return _search("lambda", values, lambda v: replace(base, lam=v), scenario, net, paths, seed, criterion)


def search_alpha(scenario: Scenario, config: SimConfig, net: ValueNet, lam: float,
                 paths: Sequence[Sequence[Request]], samples: int = 21, seed: int = 0,
                 values: Sequence[float] | None = None, criterion: str = "served") -> SearchResult:
    """Linear search of alpha at the chosen lambda; 0 is always among the candidates."""
    if values is None:
        if samples <= 0:
            raise ValueError("need at least one sample")
        values = _sample(np.random.default_rng(seed + 1), samples, *ALPHA_RANGE, open_interval=False)
    elif len(values) == 0:
        raise ValueError("need at least one sample")
    if any(not -10.0 <= v <= 10.0 for v in values):
        raise ValueError("alpha candidates must lie in [-10, 10]")
    base = replace(config, mode="cevd", lam=lam)
    return _search("alpha", values, lambda v: replace(base, alpha=v), scenario, net, paths, seed, criterion)


def evenly_spaced(n: int, lo: float, hi: float, open_interval: bool) -> list[float]:
    """n evenly spaced points; an open interval excludes its end points."""
    if open_interval:
        return [lo + (hi - lo) * (k + 1) / (n + 1) for k in range(n)]
    if n == 1:
        return [0.5 * (lo + hi)]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


@dataclass
class Calibration:
    lam: SearchResult
    alpha: SearchResult

    @property
    def params(self) -> tuple[float, float]:
        return self.lam.best, self.alpha.best

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "param_value", "objective", "seed"])
            for res in (self.lam, self.alpha):
                for v, obj, s in res.records:
                    w.writerow([res.stage, repr(v), repr(obj), s])
            w.writerow(["best_lambda", repr(self.lam.best), "", ""])
            w.writerow(["best_alpha", repr(self.alpha.best), "", ""])


def read_calibration(path: str | Path) -> tuple[float, float]:
    lam = alpha = None
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["stage"] == "best_lambda":
                lam = float(r["param_value"])
            elif r["stage"] == "best_alpha":
                alpha = float(r["param_value"])
    if lam is None or alpha is None:
        raise ValueError(f"{path}: calibration report lacks best_lambda/best_alpha rows")
    return lam, alpha


def calibrate(scenario: Scenario, config: SimConfig, net: ValueNet, paths: Sequence[Sequence[Request]],
              lambda_samples: int = 11, alpha_samples: int = 21, seed: int = 0, criterion: str = "served",
              grid: bool = False) -> Calibration:
    """Search lambda at alpha = 0, then alpha at the best lambda."""
    lam_vals = evenly_spaced(lambda_samples, *LAMBDA_RANGE, True) if grid else None
    alpha_vals = evenly_spaced(alpha_samples, *ALPHA_RANGE, False) if grid else None
    lam = search_lambda(scenario, config, net, paths, lambda_samples, seed, lam_vals, criterion)
    alpha = search_alpha(scenario, config, net, lam.best, paths, alpha_samples, seed, alpha_vals, criterion)
    return Calibration(lam, alpha)
