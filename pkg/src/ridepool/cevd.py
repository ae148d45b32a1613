"""Neighbour-aware action values.

Each vehicle's value for an action is blended with the expected values of
the other vehicles in its intersection cluster.  A neighbour's action is
weighted by exp(alpha * d(cluster of that action, cluster of ours)),
normalised over the neighbour's own feasible actions, and the neighbour
average is mixed in with weight lambda:

    vhat = (v + lambda * mean_j E_j[v_j | our action]) / (1 + lambda)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ridepool.road_network import ClusterAssignment


@dataclass(frozen=True, eq=False)
class CondProbKernel:
    """Unnormalised weights W[k1, k2] = exp(alpha * d[k1, k2] / scale).

    ``scale`` converts cluster distances (seconds) into the unit alpha is
    expressed in; the default of 60 means minutes.
    """

    alpha: float
    distance: np.ndarray
    scale: float = 60.0
    W: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = np.asarray(self.distance, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("cluster distance must be a square matrix")
        if not self.scale > 0:
            raise ValueError("distance scale must be positive")
        with np.errstate(over="ignore", under="ignore"):
            W = np.exp(self.alpha * d / self.scale)
        if not (np.isfinite(W).all() and (W > 0).all()):
            raise ValueError(f"alpha={self.alpha} over-/underflows the kernel; increase the distance scale")
        W.setflags(write=False)
        object.__setattr__(self, "distance", d)
        object.__setattr__(self, "W", W)

    @classmethod
    def from_clusters(cls, clusters: ClusterAssignment, alpha: float, scale: float = 60.0) -> "CondProbKernel":
        return cls(alpha, clusters.distance, scale)

    @property
    def K(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class CevdParams:
    lam: float = 0.0
    gamma: float = 0.9

    def __post_init__(self):
        if self.lam == -1.0:
            raise ValueError("lambda = -1 makes the affine combination undefined")
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")


def conditional_probs(kernel: CondProbKernel, f_cluster: int, neighbor_clusters: Sequence[int]) -> np.ndarray:
    """Distribution over a neighbour's actions (given by their clusters) conditioned on our action's cluster."""
    if len(neighbor_clusters) == 0:
        raise ValueError("a neighbour always has at least the null action")
    w = kernel.W[np.asarray(neighbor_clusters, dtype=int), f_cluster]
    return w / w.sum()


def _check_tables(values, action_clusters, vehicle_clusters):
    if not (len(values) == len(action_clusters) == len(vehicle_clusters)):
        raise ValueError("values, action clusters and vehicle clusters must cover the same vehicles")
    for i, (v, c) in enumerate(zip(values, action_clusters)):
        if len(v) != len(c):
            raise ValueError(f"vehicle {i}: {len(v)} values for {len(c)} actions")


def cevd_value(i: int, f: int, values: Sequence[Sequence[float]], action_clusters: Sequence[Sequence[int]],
               vehicle_clusters: Sequence[int], kernel: CondProbKernel, params: CevdParams) -> float:
    """Blended value of vehicle i taking its action f, computed term by term."""
    _check_tables(values, action_clusters, vehicle_clusters)
    own = float(values[i][f])
    k = vehicle_clusters[i]
    neighbours = [j for j in range(len(values)) if j != i and vehicle_clusters[j] == k]
    if not neighbours:
        return own
    kf = action_clusters[i][f]
    total = 0.0
    for j in neighbours:
        p = conditional_probs(kernel, kf, action_clusters[j])
        total += float(np.dot(p, np.asarray(values[j], dtype=float)))
    return (own + params.lam * total / len(neighbours)) / (1.0 + params.lam)


def cevd_values(values: Sequence[Sequence[float]], action_clusters: Sequence[Sequence[int]],
                vehicle_clusters: Sequence[int], kernel: CondProbKernel, params: CevdParams) -> list[np.ndarray]:
    """Blended values for every (vehicle, action) in time linear in the number of actions.

    A neighbour's expected value depends on our action only through the
    action's cluster, so each vehicle contributes one K-vector
    E_j[kf] = sum_g W[c_g, kf] v_g / sum_g W[c_g, kf]; cluster totals of
    these vectors are shared by every member of the cluster.
    """
    _check_tables(values, action_clusters, vehicle_clusters)
    K = kernel.K
    n = len(values)
    vals = [np.asarray(v, dtype=float) for v in values]
    acs = [np.asarray(c, dtype=int) for c in action_clusters]
    members: dict[int, list[int]] = {}
    for i, k in enumerate(vehicle_clusters):
        members.setdefault(int(k), []).append(i)
    E = np.zeros((n, K))
    for i in range(n):
        if len(members[int(vehicle_clusters[i])]) > 1:
            num = np.bincount(acs[i], weights=vals[i], minlength=K) @ kernel.W
            den = np.bincount(acs[i], minlength=K).astype(float) @ kernel.W
            E[i] = num / den
    totals = {k: E[idx].sum(axis=0) for k, idx in members.items() if len(idx) > 1}
    out = []
    lam = params.lam
    for i in range(n):
        idx = members[int(vehicle_clusters[i])]
        if len(idx) == 1:
            out.append(vals[i].copy())
            continue
        feedback = (totals[int(vehicle_clusters[i])] - E[i]) / (len(idx) - 1)
        out.append((vals[i] + lam * feedback[acs[i]]) / (1.0 + lam))
    return out


def score_all(rewards: Sequence[Sequence[float]], values: Sequence[Sequence[float]],
              action_clusters: Sequence[Sequence[int]], vehicle_clusters: Sequence[int],
              kernel: CondProbKernel, params: CevdParams) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """ILP coefficients J + gamma * vhat for every (vehicle, action); also returns vhat."""
    if len(rewards) != len(values):
        raise ValueError("rewards and values must cover the same vehicles")
    for i, (r, v) in enumerate(zip(rewards, values)):
        if len(r) != len(v):
            raise ValueError(f"vehicle {i}: missing value entries")
    vhat = cevd_values(values, action_clusters, vehicle_clusters, kernel, params)
    scores = [np.asarray(r, dtype=float) + params.gamma * vh for r, vh in zip(rewards, vhat)]
    return scores, vhat


def dump_scores_csv(path: str | Path, vehicle_ids: Sequence[int], rewards, values, vhat, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle", "action_index", "J", "V", "Vhat", "score"])
        for vid, r, v, vh, s in zip(vehicle_ids, rewards, values, vhat, scores):
            for a in range(len(s)):
                w.writerow([vid, a, r[a], repr(float(v[a])), repr(float(vh[a])), repr(float(s[a]))])
