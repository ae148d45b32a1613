"""Per-epoch assignment ILP: each vehicle takes exactly one action, each request at most one vehicle.

``solve`` splits the instance into independent components (vehicles linked
by a shared request), short-circuits components whose per-vehicle best
actions do not collide, and runs depth-first branch and bound over LP
relaxations on the rest.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

INT_TOL = 1e-6
PIVOT_TOL = 1e-9
DENSE_LP_LIMIT = 20_000  # tableau cells; larger relaxations go to HiGHS


@dataclass(frozen=True)
class AssignmentInstance:
    """Scores and request-id sets of each vehicle's candidate actions."""

    scores: tuple[tuple[float, ...], ...]
    requests: tuple[tuple[frozenset[int], ...], ...]
    vehicle_ids: tuple[int, ...] = ()

    def __post_init__(self):
        scores = tuple(tuple(float(s) for s in row) for row in self.scores)
        reqs = tuple(tuple(frozenset(a) for a in row) for row in self.requests)
        if len(scores) != len(reqs):
            raise ValueError("scores and request sets disagree on the number of vehicles")
        for i, (srow, rrow) in enumerate(zip(scores, reqs)):
            if len(srow) != len(rrow):
                raise ValueError(f"vehicle {i}: {len(srow)} scores for {len(rrow)} actions")
            if not srow:
                raise ValueError(f"vehicle {i} has no actions")
            if not all(math.isfinite(s) for s in srow):
                raise ValueError(f"vehicle {i} has a non-finite score")
            if not any(not a for a in rrow):
                raise ValueError(f"vehicle {i} has no request-free (null) action")
        ids = tuple(self.vehicle_ids) or tuple(range(len(scores)))
        if len(ids) != len(scores):
            raise ValueError("vehicle_ids length does not match")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "requests", reqs)
        object.__setattr__(self, "vehicle_ids", ids)

    @property
    def n_vehicles(self) -> int:
        return len(self.scores)

    @property
    def request_universe(self) -> frozenset[int]:
        return frozenset().union(*(a for row in self.requests for a in row))

    def objective(self, choice: Sequence[int]) -> float:
        total = 0.0
        for i, c in enumerate(choice):
            total += self.scores[i][c]
        return total

    def to_json(self) -> str:
        return json.dumps({
            "vehicles": [
                {"id": vid, "actions": [{"requests": sorted(a), "score": s} for a, s in zip(rr, ss)]}
                for vid, ss, rr in zip(self.vehicle_ids, self.scores, self.requests)
            ]
        })

    @classmethod
    def from_json(cls, text: str) -> "AssignmentInstance":
        data = json.loads(text)
        vs = data["vehicles"]
        return cls(
            tuple(tuple(a["score"] for a in v["actions"]) for v in vs),
            tuple(tuple(frozenset(a["requests"]) for a in v["actions"]) for v in vs),
            tuple(v["id"] for v in vs),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


@dataclass
class Assignment:
    choice: list[int]
    objective: float
    optimal: bool = True
    nodes: int = 0
    root_bound: float = math.nan
    bound_trace: list[tuple[float, float]] = field(default_factory=list, repr=False)


def check_assignment(inst: AssignmentInstance, choice: Sequence[int]) -> list[str]:
    """Violations of the one-action-per-vehicle, one-vehicle-per-request and integrality constraints."""
    problems = []
    if len(choice) != inst.n_vehicles:
        problems.append(f"{len(choice)} choices for {inst.n_vehicles} vehicles")
        return problems
    seen: dict[int, int] = {}
    for i, c in enumerate(choice):
        if not isinstance(c, (int, np.integer)):
            problems.append(f"vehicle {i}: non-integral choice {c!r}")
            continue
        if not 0 <= c < len(inst.scores[i]):
            problems.append(f"vehicle {i}: action index {c} out of range")
            continue
        for r in inst.requests[i][c]:
            if r in seen:
                problems.append(f"request {r} assigned to vehicles {seen[r]} and {i}")
            seen[r] = i
    return problems


def _argmax(row: Sequence[float], allowed=None) -> int:
    best, arg = -math.inf, -1
    for a, s in enumerate(row):
        if (allowed is None or allowed(a)) and s > best:
            best, arg = s, a
    return arg


def _components(inst: AssignmentInstance) -> list[list[int]]:
    parent = list(range(inst.n_vehicles))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner: dict[int, int] = {}
    for i, row in enumerate(inst.requests):
        for a in row:
            for r in a:
                if r in owner:
                    ri, rj = find(i), find(owner[r])
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
                else:
                    owner[r] = i
    groups: dict[int, list[int]] = {}
    for i in range(inst.n_vehicles):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def _greedy(inst: AssignmentInstance, vehicles: Sequence[int]) -> dict[int, int]:
    pairs = sorted(((inst.scores[i][a], -i, -a) for i in vehicles for a in range(len(inst.scores[i]))), reverse=True)
    used: set[int] = set()
    choice: dict[int, int] = {}
    for _, ni, na in pairs:
        i, a = -ni, -na
        if i in choice or not used.isdisjoint(inst.requests[i][a]):
            continue
        choice[i] = a
        used |= inst.requests[i][a]
    return choice


class _Timeout(Exception):
    pass


def simplex_max(c: np.ndarray, A_eq: np.ndarray, A_ub: np.ndarray, max_pivots: int = 100_000):
    """max c.x  s.t.  A_eq x = 1, A_ub x <= 1, x >= 0  by the two-phase tableau method.

    Pivoting uses Dantzig's rule and falls back to Bland's rule after a run
    of degenerate pivots, so it terminates on the highly degenerate
    assignment polytopes met here.  Returns (x, value) or None if infeasible.
    """
    m1, n = A_eq.shape
    m2 = A_ub.shape[0]
    m = m1 + m2
    width = n + m2 + m1
    T = np.zeros((m + 1, width + 1))
    T[:m1, :n] = A_eq
    T[m1:m, :n] = A_ub
    T[m1:m, n:n + m2] = np.eye(m2)
    T[:m1, n + m2:width] = np.eye(m1)
    T[:m, -1] = 1.0
    basis = list(range(n + m2, width)) + list(range(n, n + m2))

    def run(allowed: int) -> bool:
        degenerate = 0
        for _ in range(max_pivots):
            row0 = T[-1, :allowed]
            if degenerate > 50:
                neg = np.flatnonzero(row0 < -PIVOT_TOL)
                if not len(neg):
                    return True
                j = int(neg[0])
            else:
                j = int(np.argmin(row0))
                if row0[j] >= -PIVOT_TOL:
                    return True
            col = T[:m, j]
            pos = np.flatnonzero(col > PIVOT_TOL)
            if not len(pos):
                raise RuntimeError("unbounded LP relaxation")
            ratios = T[pos, -1] / col[pos]
            best = ratios.min()
            ties = pos[ratios <= best + 1e-12]
            i = int(min(ties, key=lambda r: basis[r]))
            degenerate = degenerate + 1 if T[i, -1] <= PIVOT_TOL else 0
            T[i] /= T[i, j]
            others = T[:, j].copy()
            others[i] = 0.0
            T[...] -= np.outer(others, T[i])
            basis[i] = j
        raise RuntimeError("simplex pivot limit reached")

    # phase 1: drive the artificial variables of the equality rows to zero
    T[-1, :] = 0.0
    T[-1, :width + 1] -= T[:m1, :width + 1].sum(axis=0)
    T[-1, n + m2:width] = 0.0
    run(width)
    if -T[-1, -1] > 1e-7:
        return None
    for i in range(m):
        if basis[i] >= n + m2:
            row = T[i, :n + m2]
            nz = np.flatnonzero(np.abs(row) > PIVOT_TOL)
            if len(nz):
                j = int(nz[0])
                T[i] /= T[i, j]
                others = T[:, j].copy()
                others[i] = 0.0
                T[...] -= np.outer(others, T[i])
                basis[i] = j
    # phase 2 over original and slack columns only
    T[-1, :] = 0.0
    T[-1, :n] = -c
    for i, b in enumerate(basis):
        if b < n and c[b] != 0.0:
            T[-1] += c[b] * T[i]
    run(n + m2)
    x = np.zeros(n)
    for i, b in enumerate(basis):
        if b < n:
            x[b] = T[i, -1]
    return x, float(c @ x)


def _highs_max(c: np.ndarray, A_eq: np.ndarray, A_ub: np.ndarray):
    out = linprog(-c, A_ub=A_ub if len(A_ub) else None, b_ub=np.ones(len(A_ub)) if len(A_ub) else None,
                  A_eq=A_eq, b_eq=np.ones(len(A_eq)), bounds=(0.0, None), method="highs")
    if out.status == 2:
        return None
    if out.status != 0:
        raise RuntimeError(f"LP relaxation failed: {out.message}")
    return out.x, float(c @ out.x)


class _Relaxation:
    """LP relaxation of one component with some variables fixed to 0 or 1."""

    def __init__(self, inst: AssignmentInstance, vehicles: Sequence[int]):
        self.var = [(i, a) for i in vehicles for a in range(len(inst.scores[i]))]
        self.c = np.array([inst.scores[i][a] for i, a in self.var])
        self.owner = np.array([i for i, _ in self.var])
        self.vehicles = list(vehicles)
        reqs = sorted(set().union(*(inst.requests[i][a] for i, a in self.var)))
        rpos = {r: k for k, r in enumerate(reqs)}
        self.uses = np.zeros((len(reqs), len(self.var)), dtype=bool)
        for k, (i, a) in enumerate(self.var):
            for r in inst.requests[i][a]:
                self.uses[rpos[r], k] = True

    def solve(self, lo: np.ndarray, hi: np.ndarray):
        live = hi > 0.5
        fixed = np.flatnonzero(lo > 0.5)
        const = float(self.c[fixed].sum())
        open_vehicles = set(self.vehicles) - set(self.owner[fixed].tolist())
        if len(fixed):
            # a vehicle fixed to an action drops its other actions, and its requests become unavailable
            live &= ~np.isin(self.owner, self.owner[fixed])
            taken = self.uses[:, fixed].any(axis=1)
            live &= ~self.uses[taken].any(axis=0)
        cols = np.flatnonzero(live)
        rows_v = sorted(open_vehicles)
        owners = self.owner[cols]
        if any(not (owners == v).any() for v in rows_v):
            return None
        A_eq = (owners[None, :] == np.array(rows_v)[:, None]).astype(float)
        sub = self.uses[:, cols]
        shared = sub.sum(axis=1) > 1
        A_ub = sub[shared].astype(float)
        if not len(cols):
            res = (np.zeros(0), 0.0)
        elif len(cols) * (len(A_eq) + len(A_ub)) <= DENSE_LP_LIMIT:
            res = simplex_max(self.c[cols], A_eq, A_ub)
        else:
            res = _highs_max(self.c[cols], A_eq, A_ub)
        if res is None:
            return None
        x = lo.astype(float).copy()
        x[cols] = res[0]
        return x, const + res[1]


def _round(inst, var, x, lo, hi, c, vehicles) -> dict[int, int] | None:
    """Incumbent from an LP point: take variables by decreasing LP value, then score, skipping conflicts."""
    order = sorted((k for k in range(len(var)) if hi[k] > 0.5),
                   key=lambda k: (-lo[k], -round(x[k], 9), -c[k], k))
    used: set[int] = set()
    choice: dict[int, int] = {}
    for k in order:
        i, a = var[k]
        if i in choice or not used.isdisjoint(inst.requests[i][a]):
            continue
        choice[i] = a
        used |= inst.requests[i][a]
    if len(choice) != len(vehicles) or any(lo[k] > 0.5 and choice[var[k][0]] != var[k][1] for k in range(len(var))):
        return None
    return choice


def _branch_and_bound(inst: AssignmentInstance, vehicles: Sequence[int], deadline: float, trace: list):
    relax = _Relaxation(inst, vehicles)
    var = relax.var
    n = len(var)
    greedy = _greedy(inst, vehicles)
    best_choice = dict(greedy)
    best_val = sum(inst.scores[i][greedy[i]] for i in vehicles)
    tol = 1e-9 * max(1.0, float(np.abs(relax.c).max()))

    nodes = 0
    root_bound = math.nan
    closed = True
    stack = [(np.zeros(n), np.ones(n), math.inf)]
    while stack:
        if time.perf_counter() > deadline:
            closed = False
            break
        lo, hi, parent_bound = stack.pop()
        nodes += 1
        res = relax.solve(lo, hi)
        if res is None:
            continue
        x, bound = res
        if nodes == 1:
            root_bound = bound
        trace.append((parent_bound, bound))
        if bound <= best_val + tol:
            continue
        frac = np.abs(x - np.round(x))
        if frac.max() <= INT_TOL:
            choice = {var[k][0]: var[k][1] for k in np.flatnonzero(x > 0.5)}
            val = sum(inst.scores[i][choice[i]] for i in vehicles)
            if val > best_val:
                best_val, best_choice = val, choice
            continue
        rounded = _round(inst, var, x, lo, hi, relax.c, vehicles)
        if rounded is not None:
            val = sum(inst.scores[i][rounded[i]] for i in vehicles)
            if val > best_val:
                best_val, best_choice = val, rounded
                if bound <= best_val + tol:
                    continue
        # most fractional variable; ties fall to the lowest (vehicle, action) position
        k = int(np.argmin(np.round(np.abs(x - 0.5), 9)))
        down_hi = hi.copy()
        down_hi[k] = 0.0
        up_lo = lo.copy()
        up_lo[k] = 1.0
        stack.append((lo, down_hi, bound))
        stack.append((up_lo, hi, bound))
    return best_choice, closed, nodes, root_bound


def solve(inst: AssignmentInstance, time_budget: float = 48.0, decompose: bool = True,
          trace: bool = False) -> Assignment:
    """Exact assignment by branch and bound; ``optimal`` is False if the budget ran out."""
    deadline = time.perf_counter() + time_budget
    choice: dict[int, int] = {}
    optimal = True
    nodes = 0
    root_bound = 0.0
    bound_trace: list = []
    groups = _components(inst) if decompose else [list(range(inst.n_vehicles))]
    for group in groups:
        local = {i: _argmax(inst.scores[i]) for i in group}
        used: set[int] = set()
        clash = False
        for i in group:
            req = inst.requests[i][local[i]]
            if not used.isdisjoint(req):
                clash = True
                break
            used |= req
        if clash or not decompose:
            local, closed, n, rb = _branch_and_bound(inst, group, deadline, bound_trace)
            optimal &= closed
            nodes += n
            root_bound += rb if not math.isnan(rb) else sum(inst.scores[i][local[i]] for i in group)
        else:
            root_bound += sum(inst.scores[i][local[i]] for i in group)
        choice.update(local)
    out = [choice[i] for i in range(inst.n_vehicles)]
    return Assignment(out, inst.objective(out), optimal, nodes, root_bound, bound_trace if trace else [])


def brute_force(inst: AssignmentInstance, limit: int = 10**6) -> Assignment:
    """Exact optimum by enumerating joint actions (test oracle)."""
    sizes = [len(row) for row in inst.scores]
    if math.prod(sizes) > limit:
        raise ValueError(f"{math.prod(sizes)} joint actions exceed the enumeration limit {limit}")
    best, best_val = None, -math.inf
    for joint in product(*(range(s) for s in sizes)):
        used: set[int] = set()
        ok = True
        for i, a in enumerate(joint):
            req = inst.requests[i][a]
            if not used.isdisjoint(req):
                ok = False
                break
            used |= req
        if not ok:
            continue
        val = inst.objective(joint)
        if val > best_val:
            best, best_val = list(joint), val
    return Assignment(best, best_val, True)
