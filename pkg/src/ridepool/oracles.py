"""Slow reference implementations and randomised cross-checks.

Everything here avoids the fast code paths it checks: routes come from
plain permutation enumeration, joint actions from exhaustive products,
future demand from a double loop and gradients from central differences.
"""

from __future__ import annotations

from itertools import combinations, permutations
from typing import Sequence

import numpy as np

from ridepool.actions import generate_feasible_actions
from ridepool.cevd import CondProbKernel, conditional_probs
from ridepool.demand import Request, compute_future_demand
from ridepool.fleet import DROPOFF, PICKUP, DelayConstraints, Vehicle, advance, best_insertion, detour_delay, pickup_delay
from ridepool.matching import AssignmentInstance, brute_force, check_assignment, solve
from ridepool.road_network import RoadNetwork, generate_grid_city
from ridepool.value_fn import ValueNet, softplus


# -- routes and actions ----------------------------------------------------------


def _stops(request: Request, net: RoadNetwork, constraints: DelayConstraints):
    t0 = request.arrival_epoch * constraints.delta
    direct = net.travel_time(request.origin, request.destination)
    return ((request.origin, PICKUP, request.id, t0 + constraints.tau),
            (request.destination, DROPOFF, request.id, t0 + direct + 2 * constraints.tau))


def oracle_best_route(vehicle: Vehicle, trip: Sequence[Request], net: RoadNetwork, now: float,
                      constraints: DelayConstraints) -> float | None:
    """Shortest completion time over every valid stop order, or None if none is valid."""
    existing = [(s.location, s.kind, s.request_id, s.deadline) for s in vehicle.route]
    new = [s for r in trip for s in _stops(r, net, constraints)]
    if len(vehicle.onboard) + len({s[2] for s in existing if s[1] == PICKUP}) + len(trip) > vehicle.capacity:
        return None
    stops = existing + new
    best = None
    for order in permutations(range(len(stops))):
        if [i for i in order if i < len(existing)] != list(range(len(existing))):
            continue
        seq = [stops[i] for i in order]
        seen = set()
        ok = True
        for _, kind, rid, _ in seq:
            if kind == DROPOFF and rid not in vehicle.onboard and rid not in seen:
                ok = False
                break
            if kind == PICKUP:
                seen.add(rid)
        if not ok:
            continue
        t, cur = now + vehicle.offset, vehicle.location
        for loc, _, _, deadline in seq:
            t += net.travel_time(cur, loc)
            cur = loc
            if t > deadline:
                ok = False
                break
        if ok and (best is None or t < best):
            best = t
    if best is None:
        return None
    return best - now


def powerset_actions(vehicle: Vehicle, requests: Sequence[Request], net: RoadNetwork, now: float,
                     constraints: DelayConstraints) -> set[frozenset[int]]:
    """Every request subset (empty set included) that has a valid route."""
    out = {frozenset()}
    seats = vehicle.capacity - len(vehicle.onboard) - len({s.request_id for s in vehicle.route if s.kind == PICKUP})
    for k in range(1, min(seats, len(requests)) + 1):
        for trip in combinations(requests, k):
            if oracle_best_route(vehicle, trip, net, now, constraints) is not None:
                out.add(frozenset(r.id for r in trip))
    return out


def delay_violations(vehicle: Vehicle, route, trip: Sequence[Request], net: RoadNetwork, now: float,
                     constraints: DelayConstraints) -> list[str]:
    """Pickup delay above tau or detour above 2 tau for any request of ``trip`` under ``route``."""
    planned = Vehicle(vehicle.id, vehicle.capacity, vehicle.location, tuple(route), vehicle.onboard, vehicle.offset)
    out = []
    for r in trip:
        p = pickup_delay(planned, r, net, now, constraints.delta)
        d = detour_delay(planned, r, net, now)
        if p > constraints.tau + 1e-9:
            out.append(f"request {r.id}: pickup delay {p} > {constraints.tau}")
        if d > constraints.max_detour + 1e-9:
            out.append(f"request {r.id}: detour {d} > {constraints.max_detour}")
    return out


def random_action_scenario(rng: np.random.Generator, max_requests: int = 5):
    """Small city, one vehicle with a partly executed route and up to ``max_requests`` new requests."""
    net = generate_grid_city(4, 4, 60, seed=int(rng.integers(1 << 30)))
    constraints = DelayConstraints(tau=float(rng.choice([90.0, 120.0, 180.0, 300.0])), delta=60.0)
    capacity = int(rng.integers(2, 5))
    nodes = net.nodes
    vehicle = Vehicle(0, capacity, int(rng.choice(nodes)))
    rid = 0
    # give the vehicle some earlier commitments, then let it drive part of the way
    for _ in range(int(rng.integers(0, 3))):
        o, e = rng.choice(nodes, size=2, replace=False)
        r = Request(rid, int(o), int(e), 0)
        rid += 1
        ins = best_insertion(vehicle, [r], net, 0.0, constraints)
        if ins is not None:
            vehicle = Vehicle(vehicle.id, capacity, vehicle.location, ins.route, vehicle.onboard, vehicle.offset)
    now = constraints.delta
    vehicle = advance(vehicle, net, now, 0.0).vehicle
    reqs = []
    for _ in range(int(rng.integers(1, max_requests + 1))):
        o, e = rng.choice(nodes, size=2, replace=False)
        reqs.append(Request(rid, int(o), int(e), 1))
        rid += 1
    return net, vehicle, reqs, now, constraints


def check_actions(net, vehicle, requests, now, constraints) -> list[str]:
    problems = []
    aset = generate_feasible_actions(vehicle, requests, net, now, constraints, cap_combos=None)
    got = {a.request_ids for a in aset.actions}
    want = powerset_actions(vehicle, requests, net, now, constraints)
    if got != want:
        problems.append(f"action sets differ: extra {sorted(map(sorted, got - want))}, "
                        f"missing {sorted(map(sorted, want - got))}")
    by_id = {r.id: r for r in requests}
    for a in aset.actions:
        trip = [by_id[i] for i in a.request_ids]
        problems += delay_violations(vehicle, a.route, trip, net, now, constraints)
        if trip:
            ref = oracle_best_route(vehicle, trip, net, now, constraints)
            if ref is None or abs(ref - a.duration) > 1e-9:
                problems.append(f"trip {sorted(a.request_ids)}: duration {a.duration}, oracle {ref}")
    return problems


# -- assignment --------------------------------------------------------------------


def random_instance(rng: np.random.Generator, max_vehicles: int = 4, max_requests: int = 4,
                    max_actions: int = 8, integer: bool = False) -> AssignmentInstance:
    nv = int(rng.integers(1, max_vehicles + 1))
    nr = int(rng.integers(1, max_requests + 1))
    scores, reqs = [], []
    for _ in range(nv):
        n_act = int(rng.integers(1, max_actions + 1))
        row_s = [float(rng.integers(0, 3)) if integer else float(rng.normal(0.0, 0.5))]
        row_r = [frozenset()]
        for _ in range(n_act - 1):
            k = int(rng.integers(1, nr + 1))
            row_r.append(frozenset(rng.choice(nr, size=k, replace=False).tolist()))
            row_s.append(float(rng.integers(0, 8)) if integer else float(rng.normal(k, 1.0)))
        scores.append(row_s)
        reqs.append(row_r)
    return AssignmentInstance(scores, reqs)


def check_solver(inst: AssignmentInstance) -> list[str]:
    got = solve(inst)
    ref = brute_force(inst)
    problems = check_assignment(inst, got.choice)
    if got.objective != ref.objective:
        problems.append(f"objective {got.objective!r} != brute force {ref.objective!r}")
    if inst.objective(got.choice) != got.objective:
        problems.append("reported objective differs from the sum of chosen scores")
    return problems


# -- value network -------------------------------------------------------------------


def numeric_gradients(net: ValueNet, X: np.ndarray, y: np.ndarray, h: float = 1e-6) -> list[np.ndarray]:
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up, _ = net.loss_and_grad(X, y)
            p[idx] = old - h
            down, _ = net.loss_and_grad(X, y)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def gradient_relative_error(net: ValueNet, X: np.ndarray, y: np.ndarray) -> float:
    """Max over parameters of |analytic - numeric| / max(|analytic| + |numeric|, 1e-8)."""
    _, grads = net.loss_and_grad(X, y)
    num = numeric_gradients(net, X, y)
    worst = 0.0
    for a, n in zip(grads, num):
        err = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


def random_net(rng: np.random.Generator) -> tuple[ValueNet, np.ndarray, np.ndarray]:
    n_in = int(rng.integers(2, 8))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=2))
    act = str(rng.choice(["relu", "tanh"]))
    out = str(rng.choice(["softplus", "linear"]))
    net = ValueNet(n_in, hidden, act, out, seed=int(rng.integers(1 << 30)))
    # random biases keep relu pre-activations off the kink at exactly 0
    for b in net.params[1::2]:
        b += rng.normal(0.0, 0.5, size=b.shape)
    X = rng.normal(size=(int(rng.integers(1, 6)), n_in))
    y = rng.normal(size=len(X))
    return net, X, y


# -- demand and kernel ----------------------------------------------------------------


def future_demand_naive(g_paths, gamma: float, T: int) -> np.ndarray:
    g = np.asarray(g_paths, dtype=float)
    if g.ndim == 2:
        g = g[None]
    P, n, K = g.shape
    F = np.zeros((n, K))
    for t in range(n):
        for k in range(K):
            total = 0.0
            for p in range(P):
                for s in range(T + 1):
                    if t + s < n:
                        total += gamma ** s * g[p, t + s, k]
            F[t, k] = total / P
    return F


def check_probabilities(rng: np.random.Generator) -> list[str]:
    K = int(rng.integers(1, 8))
    D = rng.uniform(0.0, 1800.0, size=(K, K))
    alpha = float(rng.uniform(-10.0, 10.0))
    kernel = CondProbKernel(alpha, D)
    f = int(rng.integers(K))
    nb = rng.integers(0, K, size=int(rng.integers(1, 12))).tolist()
    p = conditional_probs(kernel, f, nb)
    problems = []
    if abs(p.sum() - 1.0) > 1e-9:
        problems.append(f"alpha={alpha}: probabilities sum to {p.sum()!r}")
    if not (p > 0).all():
        problems.append(f"alpha={alpha}: non-positive probability {p.min()!r}")
    return problems


# -- driver ------------------------------------------------------------------------------


def run_all(instances: int = 100, seed: int = 0) -> dict[str, list[str]]:
    rng = np.random.default_rng(seed)
    out: dict[str, list[str]] = {k: [] for k in ("ilp", "actions", "gradients", "positivity",
                                                "future_demand", "probabilities")}
    for i in range(instances):
        out["ilp"] += [f"instance {i}: {p}" for p in check_solver(random_instance(rng, integer=i % 2 == 0))]
        out["actions"] += [f"scenario {i}: {p}" for p in check_actions(*random_action_scenario(rng))]
        out["probabilities"] += check_probabilities(rng)
    for i in range(max(1, instances // 5)):
        net, X, y = random_net(rng)
        err = gradient_relative_error(net, X, y)
        if err >= 1e-4:
            out["gradients"].append(f"net {i}: relative error {err:.2e}")
    z = rng.normal(0.0, 50.0, size=10 * instances)
    if not (softplus(z) > 0).all():
        out["positivity"].append("softplus returned a non-positive value")
    for i in range(max(1, instances // 10)):
        g = rng.poisson(3.0, size=(int(rng.integers(1, 4)), int(rng.integers(1, 20)), int(rng.integers(1, 5))))
        gamma, T = float(rng.uniform(0, 1)), int(rng.integers(0, 25))
        err = float(np.abs(compute_future_demand(g, gamma, T) - future_demand_naive(g, gamma, T)).max())
        if err > 1e-12 * max(1.0, float(np.abs(future_demand_naive(g, gamma, T)).max())):
            out["future_demand"].append(f"fixture {i}: max error {err:.2e}")
    return out
