"""Per-vehicle feasible actions: request combinations that admit a valid route."""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

from ridepool.demand import EpochBatch, Request
from ridepool.fleet import PICKUP, DelayConstraints, Stop, Vehicle, best_insertion
from ridepool.road_network import ClusterAssignment, RoadNetwork


@dataclass(frozen=True)
class FeasibleAction:
    vehicle_id: int
    requests: tuple[Request, ...]
    route: tuple[Stop, ...]
    duration: float  # seconds until the planned route completes
    added_duration: float  # extra seconds compared with the current route

    @property
    def reward(self) -> int:
        """Immediate reward: number of newly served requests."""
        return len(self.requests)

    @property
    def request_ids(self) -> frozenset[int]:
        return frozenset(r.id for r in self.requests)

    @property
    def is_null(self) -> bool:
        return not self.requests


@dataclass
class ActionSet:
    vehicle_id: int
    actions: list[FeasibleAction]
    truncated: bool = False

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __getitem__(self, i):
        return self.actions[i]


def reachable_requests(vehicle: Vehicle, requests: Sequence[Request], net: RoadNetwork, now: float,
                       constraints: DelayConstraints) -> list[Request]:
    """Requests whose origin the vehicle could reach before the pickup deadline, ignoring its route."""
    row = net.tt[net.index[vehicle.location]]
    ix = net.index
    t0 = now + vehicle.offset
    return [r for r in requests
            if t0 + row[ix[r.origin]] <= constraints.arrival_time(r) + constraints.tau]


def generate_feasible_actions(
    vehicle: Vehicle,
    batch: EpochBatch | Sequence[Request],
    net: RoadNetwork,
    now: float,
    constraints: DelayConstraints,
    cap_combos: int | None = 50,
    beam: int | None = None,
) -> ActionSet:
    """Null action plus every request combination with a valid insertion.

    Combinations are grown one request at a time and a k-set is only tried
    when all of its (k-1)-subsets were feasible.  If more than
    ``cap_combos`` actions result, the null action is kept and the rest are
    ranked by reward (desc), added duration (asc), request ids.
    """
    requests = batch.requests if isinstance(batch, EpochBatch) else tuple(batch)
    base = best_insertion(vehicle, (), net, now, constraints)
    null = FeasibleAction(vehicle.id, (), vehicle.route, base.duration, 0.0)
    actions = [null]
    seats = vehicle.free_seats
    if seats <= 0 or not requests:
        return ActionSet(vehicle.id, actions)

    def make(trip):
        ins = best_insertion(vehicle, trip, net, now, constraints, beam=beam)
        if ins is None:
            return None
        return FeasibleAction(vehicle.id, trip, ins.route, ins.duration, ins.duration - base.duration)

    cands = sorted(reachable_requests(vehicle, requests, net, now, constraints), key=lambda r: r.id)
    level: dict[tuple[int, ...], FeasibleAction] = {}
    for r in cands:
        a = make((r,))
        if a is not None:
            level[(r.id,)] = a
    singles = [r for r in cands if (r.id,) in level]
    by_id = {r.id: r for r in singles}
    actions.extend(level.values())
    size = 1
    while level and size < seats:
        size += 1
        nxt: dict[tuple[int, ...], FeasibleAction] = {}
        for key in level:
            for r in singles:
                if r.id <= key[-1]:
                    continue
                cand = key + (r.id,)
                if any(sub not in level for sub in combinations(cand, size - 1)):
                    continue
                a = make(tuple(by_id[i] for i in cand))
                if a is not None:
                    nxt[cand] = a
        actions.extend(nxt.values())
        level = nxt

    truncated = False
    if cap_combos is not None and len(actions) > cap_combos:
        rest = sorted(actions[1:], key=lambda a: (-a.reward, a.added_duration, tuple(sorted(a.request_ids))))
        actions = [null] + rest[: max(cap_combos - 1, 0)]
        truncated = True
    return ActionSet(vehicle.id, actions, truncated)


def action_cluster(action: FeasibleAction, clusters: ClusterAssignment | Mapping[int, int], vehicle: Vehicle) -> int:
    """Cluster of the first new pickup in the planned route; vehicle's own cluster for the null action."""
    if action.is_null:
        return clusters[vehicle.location]
    ids = action.request_ids
    for s in action.route:
        if s.kind == PICKUP and s.request_id in ids:
            return clusters[s.location]
    raise ValueError("action route has no pickup for its requests")


def dump_actions_jsonl(path: str | Path, action_sets: Sequence[ActionSet], clusters, vehicles: Sequence[Vehicle]) -> None:
    by_id = {v.id: v for v in vehicles}
    with open(path, "w") as fh:
        for aset in action_sets:
            v = by_id[aset.vehicle_id]
            for i, a in enumerate(aset.actions):
                rec = {
                    "vehicle": aset.vehicle_id,
                    "action_index": i,
                    "requests": sorted(a.request_ids),
                    "J": a.reward,
                    "route": [[s.kind, s.request_id, s.location, s.deadline] for s in a.route],
                    "cluster": action_cluster(a, clusters, v),
                    "truncated": aset.truncated,
                }
                fh.write(json.dumps(rec) + "\n")
