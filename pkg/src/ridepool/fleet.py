"""Vehicles, route plans with deadlines, exact request insertion and movement."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from ridepool.demand import Request
from ridepool.road_network import RoadNetwork

logger = logging.getLogger(__name__)

PICKUP = "pickup"
DROPOFF = "dropoff"


@dataclass(frozen=True)
class Stop:
    location: int
    kind: str
    request_id: int
    deadline: float


@dataclass(frozen=True)
class DelayConstraints:
    """Maximum pickup delay ``tau`` (detour bound is 2 * tau) and epoch length."""

    tau: float
    delta: float = 60.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @property
    def max_detour(self) -> float:
        return 2.0 * self.tau

    def arrival_time(self, request: Request) -> float:
        return request.arrival_epoch * self.delta

    def stops_for(self, request: Request, net: RoadNetwork) -> tuple[Stop, Stop]:
        """Pickup and dropoff stops with deadlines fixed at acceptance.

        Pickup by arrival + tau; dropoff by the solo direct arrival
        (arrival + shortest o->e time) + 2 tau.
        """
        t0 = self.arrival_time(request)
        direct = net.travel_time(request.origin, request.destination)
        return (
            Stop(request.origin, PICKUP, request.id, t0 + self.tau),
            Stop(request.destination, DROPOFF, request.id, t0 + direct + self.max_detour),
        )


@dataclass(frozen=True)
class Vehicle:
    """A vehicle committed to reach ``location`` in ``offset`` seconds, then follow ``route``."""

    id: int
    capacity: int
    location: int
    route: tuple[Stop, ...] = ()
    onboard: frozenset[int] = frozenset()
    offset: float = 0.0

    @property
    def pending(self) -> frozenset[int]:
        return frozenset(s.request_id for s in self.route if s.kind == PICKUP)

    @property
    def assigned(self) -> frozenset[int]:
        return self.onboard | self.pending

    @property
    def free_seats(self) -> int:
        return self.capacity - len(self.assigned)


def schedule(vehicle: Vehicle, net: RoadNetwork, now: float, route: Sequence[Stop] | None = None) -> list[float]:
    """Arrival time at each stop when driving shortest paths from the current position."""
    route = vehicle.route if route is None else route
    tt, ix = net.tt, net.index
    t = now + vehicle.offset
    cur = ix[vehicle.location]
    times = []
    for s in route:
        nxt = ix[s.location]
        t += tt[cur][nxt]
        cur = nxt
        times.append(t)
    return times


def route_problem(vehicle: Vehicle, route: Sequence[Stop] | None = None) -> str | None:
    """Structural check: pickup before dropoff, no duplicates, capacity at every prefix."""
    route = vehicle.route if route is None else route
    picked = set(vehicle.onboard)
    dropped: set[int] = set()
    load = len(vehicle.onboard)
    if load > vehicle.capacity:
        return "onboard exceeds capacity"
    pending = set()
    for s in route:
        rid = s.request_id
        if s.kind == PICKUP:
            if rid in picked or rid in dropped:
                return f"request {rid} picked up twice"
            picked.add(rid)
            pending.add(rid)
            load += 1
            if load > vehicle.capacity:
                return f"capacity exceeded at pickup of {rid}"
        elif s.kind == DROPOFF:
            if rid not in picked or rid in dropped:
                return f"dropoff of {rid} without a prior pickup"
            dropped.add(rid)
            load -= 1
        else:
            return f"unknown stop kind {s.kind!r}"
        if not math.isfinite(s.deadline):
            return f"stop for {rid} has no finite deadline"
    if picked - dropped:
        return f"requests {sorted(picked - dropped)} are never dropped off"
    return None


def validate_route(vehicle: Vehicle, net: RoadNetwork, now: float, constraints: DelayConstraints | None = None,
                   route: Sequence[Stop] | None = None) -> bool:
    """True iff the route is well formed and every stop is reached by its deadline."""
    route = vehicle.route if route is None else route
    problem = route_problem(vehicle, route)
    if problem is None:
        for s, t in zip(route, schedule(vehicle, net, now, route)):
            if t > s.deadline:
                problem = f"{s.kind} of request {s.request_id} at {t} misses deadline {s.deadline}"
                break
    if problem is not None:
        logger.debug("vehicle %s: invalid route: %s", vehicle.id, problem)
        return False
    return True


@dataclass(frozen=True)
class Insertion:
    route: tuple[Stop, ...]
    duration: float  # seconds from ``now`` until the last stop
    slack: float  # smallest deadline - scheduled time over the route


def _summarize(vehicle: Vehicle, net: RoadNetwork, now: float, route) -> Insertion:
    times = schedule(vehicle, net, now, route)
    duration = (times[-1] if times else now + vehicle.offset) - now
    slack = min((s.deadline - t for s, t in zip(route, times)), default=math.inf)
    return Insertion(tuple(route), duration, slack)


def best_insertion(
    vehicle: Vehicle,
    trip: Iterable[Request],
    net: RoadNetwork,
    now: float,
    constraints: DelayConstraints,
    beam: int | None = None,
) -> Insertion | None:
    """Shortest valid route that adds ``trip`` while keeping the existing stop order.

    Exact depth-first search over all interleavings with deadline and
    capacity pruning; ``beam`` switches to a width-limited breadth-first
    search for large capacities.  Returns None when no interleaving is valid.
    """
    trip = sorted(trip, key=lambda r: r.id)
    if not trip:
        return _summarize(vehicle, net, now, vehicle.route)
    if len(vehicle.assigned) + len(trip) > vehicle.capacity:
        return None
    if any(r.id in vehicle.assigned for r in trip):
        raise ValueError("trip contains a request already assigned to the vehicle")

    tt, ix = net.tt, net.index
    existing = [(ix[s.location], s.deadline, s) for s in vehicle.route]
    pickups, dropoffs = [], []
    for r in trip:
        p, d = constraints.stops_for(r, net)
        pickups.append((ix[p.location], p.deadline, p))
        dropoffs.append((ix[d.location], d.deadline, d))
    start_t = now + vehicle.offset
    start = ix[vehicle.location]
    if beam is not None:
        route = _beam_insert(vehicle, existing, pickups, dropoffs, tt, start, start_t, beam)
    else:
        route = _dfs_insert(vehicle, existing, pickups, dropoffs, tt, start, start_t)
    if route is None:
        return None
    return _summarize(vehicle, net, now, route)


def _dfs_insert(vehicle, existing, pickups, dropoffs, tt, start, start_t):
    k = len(pickups)
    n_exist = len(existing)
    total = n_exist + 2 * k
    state = [0] * k  # 0 = waiting, 1 = onboard, 2 = delivered
    # existing pickups raise the load; track how many existing stops are pickups ahead
    load0 = len(vehicle.onboard)
    cap = vehicle.capacity
    best_t = [math.inf]
    best_route: list = [None]
    path: list = []

    def feasible_rest(cur, t, i):
        # every remaining stop must be reachable by its deadline even if visited next
        row = tt[cur]
        for j in range(i, n_exist):
            loc, dl, _ = existing[j]
            if t + row[loc] > dl:
                return False
        for j in range(k):
            s = state[j]
            if s == 0:
                loc, dl, _ = pickups[j]
                if t + row[loc] > dl:
                    return False
            if s < 2:
                loc, dl, _ = dropoffs[j]
                if t + row[loc] > dl:
                    return False
        return True

    def visit(cur, t, i, load, depth):
        if depth == total:
            if t < best_t[0]:
                best_t[0] = t
                best_route[0] = list(path)
            return
        if t >= best_t[0] or not feasible_rest(cur, t, i):
            return
        row = tt[cur]
        if i < n_exist:
            loc, dl, stop = existing[i]
            nt = t + row[loc]
            dload = 1 if stop.kind == PICKUP else -1
            if nt <= dl and load + dload <= cap:
                path.append(stop)
                visit(loc, nt, i + 1, load + dload, depth + 1)
                path.pop()
        for j in range(k):
            s = state[j]
            if s == 2:
                continue
            if s == 0:
                loc, dl, stop = pickups[j]
                if load + 1 > cap:
                    continue
                dload = 1
            else:
                loc, dl, stop = dropoffs[j]
                dload = -1
            nt = t + row[loc]
            if nt > dl:
                continue
            state[j] = s + 1
            path.append(stop)
            visit(loc, nt, i, load + dload, depth + 1)
            path.pop()
            state[j] = s

    visit(start, start_t, 0, load0, 0)
    return best_route[0]


def _beam_insert(vehicle, existing, pickups, dropoffs, tt, start, start_t, width):
    k = len(pickups)
    n_exist = len(existing)
    cap = vehicle.capacity
    # partial: (t, cur, i, state tuple, load, route tuple)
    frontier = [(start_t, start, 0, (0,) * k, len(vehicle.onboard), ())]
    for _ in range(n_exist + 2 * k):
        nxt = []
        for t, cur, i, state, load, route in frontier:
            row = tt[cur]
            if i < n_exist:
                loc, dl, stop = existing[i]
                dload = 1 if stop.kind == PICKUP else -1
                if t + row[loc] <= dl and load + dload <= cap:
                    nxt.append((t + row[loc], loc, i + 1, state, load + dload, route + (stop,)))
            for j, s in enumerate(state):
                if s == 2 or (s == 0 and load + 1 > cap):
                    continue
                loc, dl, stop = (pickups if s == 0 else dropoffs)[j]
                if t + row[loc] <= dl:
                    st = state[:j] + (s + 1,) + state[j + 1:]
                    nxt.append((t + row[loc], loc, i, st, load + (1 if s == 0 else -1), route + (stop,)))
        if not nxt:
            return None
        nxt.sort(key=lambda p: p[0])
        frontier = nxt[:width]
    return list(frontier[0][5])


@dataclass(frozen=True)
class AdvanceResult:
    vehicle: Vehicle
    served: list[int] = field(default_factory=list)  # dropped off during the step
    picked: list[int] = field(default_factory=list)  # picked up during the step
    events: list[tuple[float, Stop]] = field(default_factory=list)


def advance(vehicle: Vehicle, net: RoadNetwork, dt: float, now: float = 0.0) -> AdvanceResult:
    """Drive the route for ``dt`` seconds along shortest paths.

    Stops are completed on arrival at their intersection.  If time runs out
    mid-edge the vehicle is committed to the edge's head intersection and
    the remaining edge time is kept in ``offset``.
    """
    loc, offset, budget = vehicle.location, vehicle.offset, float(dt)
    route = list(vehicle.route)
    onboard = set(vehicle.onboard)
    served, picked, events = [], [], []
    clock = now
    if offset > budget:
        return AdvanceResult(replace(vehicle, offset=offset - budget))
    budget -= offset
    clock += offset
    offset = 0.0
    tt, ix = net.tt, net.index
    while route:
        stop = route[0]
        if stop.location == loc:
            route.pop(0)
            events.append((clock, stop))
            if stop.kind == PICKUP:
                onboard.add(stop.request_id)
                picked.append(stop.request_id)
            else:
                onboard.discard(stop.request_id)
                served.append(stop.request_id)
            continue
        hop = net.next_hop(loc, stop.location)
        e = tt[ix[loc]][ix[hop]]
        loc = hop
        if e <= budget:
            budget -= e
            clock += e
        else:
            offset = e - budget
            break
    moved = replace(vehicle, location=loc, offset=offset, route=tuple(route), onboard=frozenset(onboard))
    return AdvanceResult(moved, served, picked, events)


def _scheduled(vehicle: Vehicle, request: Request, net: RoadNetwork, now: float):
    times = schedule(vehicle, net, now)
    pick = drop = None
    for s, t in zip(vehicle.route, times):
        if s.request_id == request.id:
            if s.kind == PICKUP:
                pick = t
            else:
                drop = t
    if drop is None:
        raise ValueError(f"request {request.id} is not in the route of vehicle {vehicle.id}")
    return pick, drop


def pickup_delay(vehicle: Vehicle, request: Request, net: RoadNetwork, now: float, delta: float) -> float:
    """Scheduled pickup time minus the request's arrival time."""
    pick, _ = _scheduled(vehicle, request, net, now)
    if pick is None:
        raise ValueError(f"request {request.id} is already onboard; its pickup is not in the route")
    return pick - request.arrival_epoch * delta


def detour_delay(vehicle: Vehicle, request: Request, net: RoadNetwork, now: float) -> float:
    """Scheduled dropoff minus (scheduled pickup + direct origin->destination time)."""
    pick, drop = _scheduled(vehicle, request, net, now)
    if pick is None:
        raise ValueError(f"request {request.id} is already onboard; its pickup is not in the route")
    return drop - (pick + net.travel_time(request.origin, request.destination))


# -- snapshot I/O ----------------------------------------------------------------


def _encode_route(route: Sequence[Stop]) -> str:
    return ";".join(f"{s.kind[0].upper()}:{s.request_id}@{s.location}@{s.deadline!r}" for s in route)


def _decode_route(text: str) -> tuple[Stop, ...]:
    stops = []
    for item in filter(None, text.split(";")):
        kind, rest = item.split(":", 1)
        rid, loc, dl = rest.split("@")
        stops.append(Stop(int(loc), PICKUP if kind == "P" else DROPOFF, int(rid), float(dl)))
    return tuple(stops)


def save_fleet(path: str | Path, vehicles: Sequence[Vehicle]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "capacity", "location", "onboard_ids", "route_encoding"])
        for v in vehicles:
            loc = f"{v.location}" if v.offset == 0 else f"{v.location}+{v.offset!r}"
            w.writerow([v.id, v.capacity, loc, " ".join(map(str, sorted(v.onboard))), _encode_route(v.route)])


def load_fleet(path: str | Path) -> list[Vehicle]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            loc, _, off = row["location"].partition("+")
            out.append(Vehicle(
                id=int(row["vehicle_id"]),
                capacity=int(row["capacity"]),
                location=int(loc),
                offset=float(off) if off else 0.0,
                onboard=frozenset(int(x) for x in row["onboard_ids"].split()),
                route=_decode_route(row["route_encoding"]),
            ))
    return out
