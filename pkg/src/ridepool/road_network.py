"""Road graph, all-pairs travel times and travel-time clustering of intersections."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

logger = logging.getLogger(__name__)

Location = int


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Directed intersection graph with a precomputed shortest-path time table.

    ``nodes`` is kept sorted; ``index`` maps a location id to its row in
    ``table``.  ``tt`` is the same table as nested Python lists, which is
    much faster than numpy for the scalar lookups done in route search.
    """

    nodes: tuple[Location, ...]
    edges: Mapping[tuple[Location, Location], float]
    coords: Mapping[Location, tuple[float, float]] | None = None
    index: dict[Location, int] = field(init=False, repr=False)
    table: np.ndarray = field(init=False, repr=False)
    tt: list[list[float]] = field(init=False, repr=False)
    _pred: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = tuple(sorted(set(self.nodes)))
        index = {u: i for i, u in enumerate(nodes)}
        edges: dict[tuple[int, int], float] = {}
        for (u, v), w in self.edges.items():
            if u not in index or v not in index:
                raise ValueError(f"edge ({u}, {v}) references an unknown location")
            if not w > 0 or not np.isfinite(w):
                raise ValueError(f"edge ({u}, {v}) has non-positive travel time {w}")
            if u == v:
                continue
            edges[(u, v)] = min(float(w), edges.get((u, v), np.inf))
        n = len(nodes)
        if n:
            rows = [index[u] for u, _ in edges]
            cols = [index[v] for _, v in edges]
            graph = csr_matrix((list(edges.values()), (rows, cols)), shape=(n, n))
            table, pred = dijkstra(graph, directed=True, return_predecessors=True)
        else:
            table = np.zeros((0, 0))
            pred = np.zeros((0, 0), dtype=np.int32)
        table.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "tt", table.tolist())
        object.__setattr__(self, "_pred", pred)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, u) -> bool:
        return u in self.index

    def travel_time(self, u: Location, v: Location) -> float:
        return travel_time(self, u, v)

    def path(self, u: Location, v: Location) -> list[Location]:
        """Intersections on the shortest path from u to v, both ends included."""
        i, j = self._ix(u), self._ix(v)
        if not np.isfinite(self.table[i, j]):
            raise ValueError(f"{v} is unreachable from {u}")
        hops = [j]
        while hops[-1] != i:
            hops.append(int(self._pred[i, hops[-1]]))
        return [self.nodes[k] for k in reversed(hops)]

    def next_hop(self, u: Location, v: Location) -> Location:
        """First intersection after u on the shortest path to v (v itself if adjacent)."""
        i, j = self._ix(u), self._ix(v)
        if i == j:
            return u
        k = j
        while True:
            p = int(self._pred[i, k])
            if p == i:
                return self.nodes[k]
            if p < 0:
                raise ValueError(f"{v} is unreachable from {u}")
            k = p

    def is_strongly_connected(self) -> bool:
        return len(self.nodes) > 0 and bool(np.isfinite(self.table).all())

    def _ix(self, u: Location) -> int:
        try:
            return self.index[u]
        except KeyError:
            raise ValueError(f"unknown location id {u!r}") from None

    # -- serialization -------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for u in self.nodes:
            if self.coords and u in self.coords:
                lat, lon = self.coords[u]
                lines.append(f"node {u} {lat!r} {lon!r}")
            else:
                lines.append(f"node {u}")
        for (u, v) in sorted(self.edges):
            lines.append(f"edge {u} {v} {self.edges[(u, v)]!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RoadNetwork":
        nodes: list[int] = []
        coords: dict[int, tuple[float, float]] = {}
        edges: dict[tuple[int, int], float] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "node" and len(parts) in (2, 4):
                    u = int(parts[1])
                    nodes.append(u)
                    if len(parts) == 4:
                        coords[u] = (float(parts[2]), float(parts[3]))
                elif parts[0] == "edge" and len(parts) == 4:
                    u, v = int(parts[1]), int(parts[2])
                    edges[(u, v)] = min(float(parts[3]), edges.get((u, v), np.inf))
                else:
                    raise ValueError(parts[0])
            except ValueError:
                raise ValueError(f"line {lineno}: malformed record {raw!r}") from None
        for u, v in edges:
            nodes.extend((u, v))
        return cls(tuple(nodes), edges, coords or None)

    @classmethod
    def load(cls, path: str | Path) -> "RoadNetwork":
        return cls.from_text(Path(path).read_text())


def travel_time(net: RoadNetwork, u: Location, v: Location) -> float:
    """Shortest-path travel time in seconds from u to v."""
    return net.tt[net._ix(u)][net._ix(v)]


def subgraph(net: RoadNetwork, keep: Iterable[Location]) -> RoadNetwork:
    keep = set(keep)
    edges = {(u, v): w for (u, v), w in net.edges.items() if u in keep and v in keep}
    coords = {u: c for u, c in net.coords.items() if u in keep} if net.coords else None
    return RoadNetwork(tuple(keep), edges, coords)


def largest_scc(net: RoadNetwork) -> RoadNetwork:
    """Induced subgraph on the largest strongly connected component.

    Ties between equally large components go to the one holding the
    smallest location id.
    """
    if not len(net):
        raise ValueError("empty graph has no strongly connected component")
    n = len(net)
    rows = [net.index[u] for u, _ in net.edges]
    cols = [net.index[v] for _, v in net.edges]
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=True, connection="strong")
    sizes = np.bincount(labels)
    best = None
    for i in range(n):  # nodes are sorted, so the first hit has the smallest id
        lab = labels[i]
        if best is None or sizes[lab] > sizes[best]:
            best = lab
    keep = [net.nodes[i] for i in range(n) if labels[i] == best]
    if len(keep) == n:
        return net
    logger.info("largest SCC keeps %d of %d intersections", len(keep), n)
    return subgraph(net, keep)


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Partition of intersections into K clusters with inter-cluster mean times."""

    mapping: Mapping[Location, int]
    K: int
    distance: np.ndarray
    medoids: tuple[Location, ...] = ()
    objective: float = 0.0

    def __post_init__(self):
        if self.K <= 0:
            raise ValueError("K must be positive")
        used = set(self.mapping.values())
        if used != set(range(self.K)):
            raise ValueError("every cluster id in [0, K) must be non-empty")
        if self.distance.shape != (self.K, self.K):
            raise ValueError("distance matrix shape does not match K")

    def __getitem__(self, u: Location) -> int:
        return self.mapping[u]

    def members(self, k: int) -> list[Location]:
        return sorted(u for u, c in self.mapping.items() if c == k)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["location_id", "cluster_id"])
            for u in sorted(self.mapping):
                w.writerow([u, self.mapping[u]])

    @classmethod
    def from_mapping(cls, net: RoadNetwork, mapping: Mapping[Location, int]) -> "ClusterAssignment":
        mapping = dict(mapping)
        if set(mapping) != set(net.nodes):
            raise ValueError("cluster mapping does not cover the network's intersections")
        K = max(mapping.values()) + 1
        return cls(mapping, K, _cluster_distance_matrix(net, mapping, K))

    @classmethod
    def from_csv(cls, path: str | Path, net: RoadNetwork) -> "ClusterAssignment":
        with open(path, newline="") as fh:
            mapping = {int(r["location_id"]): int(r["cluster_id"]) for r in csv.DictReader(fh)}
        try:
            return cls.from_mapping(net, mapping)
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None


def _cluster_distance_matrix(net: RoadNetwork, mapping: Mapping[Location, int], K: int) -> np.ndarray:
    labels = np.array([mapping[u] for u in net.nodes])
    onehot = np.zeros((len(net), K))
    onehot[np.arange(len(net)), labels] = 1.0
    sums = onehot.T @ net.table @ onehot
    counts = onehot.sum(axis=0)
    d = sums / np.outer(counts, counts)
    d.setflags(write=False)
    return d


def cluster_distance(assign: ClusterAssignment, net: RoadNetwork, k1: int, k2: int) -> float:
    """Mean shortest-path time from intersections of k1 to intersections of k2."""
    for k in (k1, k2):
        if not 0 <= k < assign.K:
            raise ValueError(f"invalid cluster id {k}")
    return float(assign.distance[k1, k2])


def _assign_to_medoids(D: np.ndarray, medoids: np.ndarray):
    sub = D[:, medoids]
    order = np.argsort(sub, axis=1, kind="stable")
    nearest = order[:, 0]
    d1 = sub[np.arange(len(D)), nearest]
    if len(medoids) > 1:
        d2 = sub[np.arange(len(D)), order[:, 1]]
    else:
        d2 = np.full(len(D), np.inf)
    return nearest, d1, d2


def cluster_intersections(net: RoadNetwork, K: int, seed: int = 0) -> ClusterAssignment:
    """K-medoids (PAM swap descent) on symmetrised shortest-path times.

    The dissimilarity between two intersections is the mean of the two
    directed travel times.  Medoids start from a farthest-first traversal
    rooted at the smallest location id; each is then moved to a random
    member of its own cell (seeded), and swaps are applied steepest-first
    until none lowers the total time-to-medoid.
    """
    n = len(net)
    if K <= 0:
        raise ValueError("K must be positive")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of intersections ({n})")
    if not net.is_strongly_connected():
        raise ValueError("clustering needs a strongly connected network")
    D = 0.5 * (net.table + net.table.T)
    rng = np.random.default_rng(seed)

    medoids = [0]
    mind = D[0].copy()
    while len(medoids) < K:
        mind[medoids] = -1.0
        nxt = int(np.argmax(mind))
        medoids.append(nxt)
        mind = np.minimum(mind, D[nxt])
    medoids = np.array(medoids)

    nearest, _, _ = _assign_to_medoids(D, medoids)
    for m in range(K):
        cell = np.flatnonzero(nearest == m)
        cand = rng.choice(cell)
        if cand not in medoids:
            medoids[m] = cand

    while True:
        nearest, d1, d2 = _assign_to_medoids(D, medoids)
        cost = d1.sum()
        best_gain, best_swap = 1e-9 * max(cost, 1.0), None
        for m in range(K):
            base = np.where(nearest == m, d2, d1)
            swap_cost = np.minimum(D, base[:, None]).sum(axis=0)
            swap_cost[medoids] = np.inf
            h = int(np.argmin(swap_cost))
            gain = cost - swap_cost[h]
            if gain > best_gain:
                best_gain, best_swap = gain, (m, h)
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]

    # relabel clusters by their smallest member so ids do not depend on swap history
    nearest, d1, _ = _assign_to_medoids(D, medoids)
    first_member = {}
    for i, m in enumerate(nearest):
        first_member.setdefault(int(m), i)
    order = sorted(first_member, key=first_member.get)
    relabel = {m: k for k, m in enumerate(order)}
    mapping = {net.nodes[i]: relabel[int(m)] for i, m in enumerate(nearest)}
    meds = tuple(net.nodes[int(medoids[m])] for m in order)
    return ClusterAssignment(mapping, K, _cluster_distance_matrix(net, mapping, K), meds, float(d1.sum()))


def generate_grid_city(
    rows: int,
    cols: int,
    edge_time: float = 60.0,
    seed: int = 0,
    jitter: float = 0.25,
    origin: tuple[float, float] = (40.75, -73.99),
    spacing_deg: float = 0.002,
) -> RoadNetwork:
    """Bidirectional rows x cols grid; node id = r * cols + c.

    Each street gets one travel time shared by both directions, drawn
    uniformly within +/- ``jitter`` of ``edge_time`` and rounded to whole
    seconds so that route arithmetic stays exact.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    rng = np.random.default_rng(seed)
    edges = {}

    def draw():
        if jitter == 0:
            return float(edge_time)
        return float(max(1.0, np.round(edge_time * (1.0 + rng.uniform(-jitter, jitter)))))

    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                w = draw()
                edges[(u, u + 1)] = edges[(u + 1, u)] = w
            if r + 1 < rows:
                w = draw()
                edges[(u, u + cols)] = edges[(u + cols, u)] = w
    coords = {
        r * cols + c: (origin[0] + r * spacing_deg, origin[1] + c * spacing_deg)
        for r in range(rows)
        for c in range(cols)
    }
    return RoadNetwork(tuple(range(rows * cols)), edges, coords)
