"""Request streams: trip-record ingestion, synthetic demand and demand statistics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ridepool.road_network import ClusterAssignment, RoadNetwork

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class Request:
    id: int
    origin: int
    destination: int
    arrival_epoch: int

    def __post_init__(self):
        if self.origin == self.destination:
            raise ValueError(f"request {self.id}: origin equals destination")
        if self.arrival_epoch < 0:
            raise ValueError(f"request {self.id}: negative arrival epoch")


@dataclass(frozen=True)
class EpochBatch:
    epoch: int
    requests: tuple[Request, ...] = ()

    def __post_init__(self):
        if any(r.arrival_epoch != self.epoch for r in self.requests):
            raise ValueError(f"batch {self.epoch} holds a request from another epoch")

    def __len__(self) -> int:
        return len(self.requests)


def epoch_batches(requests: Iterable[Request], horizon: int) -> list[EpochBatch]:
    """One batch per epoch in [0, horizon), ordered by request id inside a batch."""
    buckets: list[list[Request]] = [[] for _ in range(horizon)]
    for r in requests:
        if not 0 <= r.arrival_epoch < horizon:
            raise ValueError(f"request {r.id} arrives at epoch {r.arrival_epoch}, outside horizon {horizon}")
        buckets[r.arrival_epoch].append(r)
    return [EpochBatch(t, tuple(sorted(b, key=lambda r: r.id))) for t, b in enumerate(buckets)]


# -- ingestion ---------------------------------------------------------------

COORD_COLUMNS = ("pickup_lat", "pickup_lon", "dropoff_lat", "dropoff_lon", "pickup_unix_seconds")
SNAPPED_COLUMNS = ("pickup_loc", "dropoff_loc", "pickup_unix_seconds")


@dataclass
class IngestResult:
    requests: list[Request] = field(default_factory=list)
    malformed: int = 0
    same_od: int = 0


class _Snapper:
    """Nearest intersection under an equirectangular projection."""

    def __init__(self, net: RoadNetwork):
        if not net.coords:
            raise ValueError("network has no coordinates; use pre-snapped location columns")
        self.ids = [u for u in net.nodes if u in net.coords]
        pts = np.array([net.coords[u] for u in self.ids], dtype=float)
        self.kx = math.cos(math.radians(float(pts[:, 0].mean())))
        self.tree = cKDTree(np.column_stack([pts[:, 0], pts[:, 1] * self.kx]))

    def __call__(self, lat: float, lon: float) -> int:
        _, i = self.tree.query([lat, lon * self.kx])
        return self.ids[int(i)]


def ingest_trip_records(path: str | Path, net: RoadNetwork, delta: float, t0: float = 0.0) -> IngestResult:
    """Read a trip-record CSV into requests.

    Accepts either coordinate columns (snapped to the nearest intersection)
    or pre-snapped location ids.  Arrival epoch is floor((ts - t0) / delta).
    Rows that fail to parse are counted in ``malformed``; rows whose origin
    and destination coincide after snapping are counted in ``same_od``.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ValueError(f"cannot read trip records {path}: {exc}") from exc
    out = IngestResult()
    with fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        if not cols:
            return out
        if set(SNAPPED_COLUMNS) <= cols:
            snapped = True
        elif set(COORD_COLUMNS) <= cols:
            snapped = False
            snap = _Snapper(net)
        else:
            raise ValueError(f"{path}: header must contain {COORD_COLUMNS} or {SNAPPED_COLUMNS}")
        for row in reader:
            try:
                ts = float(row["pickup_unix_seconds"])
                if snapped:
                    o, e = int(row["pickup_loc"]), int(row["dropoff_loc"])
                    if o not in net or e not in net:
                        raise ValueError("unknown location")
                else:
                    vals = [float(row[c]) for c in COORD_COLUMNS[:4]]
                    if not all(map(math.isfinite, vals)):
                        raise ValueError("non-finite coordinate")
                    o, e = snap(vals[0], vals[1]), snap(vals[2], vals[3])
                epoch = math.floor((ts - t0) / delta)
                if epoch < 0:
                    raise ValueError("timestamp before t0")
            except (TypeError, ValueError, KeyError):
                out.malformed += 1
                continue
            if o == e:
                out.same_od += 1
                continue
            out.requests.append(Request(len(out.requests), o, e, epoch))
    if out.malformed:
        logger.warning("%s: skipped %d malformed rows", path, out.malformed)
    if out.same_od:
        logger.info("%s: dropped %d rows with identical snapped origin and destination", path, out.same_od)
    return out


def write_requests(path: str | Path, requests: Sequence[Request], delta: float) -> None:
    """Write requests in the pre-snapped trip-record format (epoch start as timestamp)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPPED_COLUMNS)
        for r in requests:
            w.writerow([r.origin, r.destination, repr(float(r.arrival_epoch * delta))])


# -- synthetic demand ------------------------------------------------------------


def synthesize_demand(
    net: RoadNetwork,
    clusters: ClusterAssignment,
    rate_profile: Sequence[float],
    seed: int,
    origin_weights: Sequence[float] | None = None,
    destination_weights: Sequence[float] | None = None,
) -> list[Request]:
    """Poisson counts per epoch; endpoints drawn cluster-first, then uniformly in the cluster."""
    rng = np.random.default_rng(seed)
    K = clusters.K
    members = [clusters.members(k) for k in range(K)]

    def weights(w):
        if w is None:
            w = [len(m) for m in members]
        w = np.asarray(w, dtype=float)
        if w.shape != (K,) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("cluster weights must be K non-negative numbers with positive sum")
        return w / w.sum()

    pw, dw = weights(origin_weights), weights(destination_weights)
    out: list[Request] = []
    for t, rate in enumerate(rate_profile):
        if rate < 0:
            raise ValueError("rates must be non-negative")
        count = int(rng.poisson(rate)) if rate > 0 else 0
        for _ in range(count):
            o = members[rng.choice(K, p=pw)]
            o = o[rng.integers(len(o))]
            while True:
                e = members[rng.choice(K, p=dw)]
                e = e[rng.integers(len(e))]
                if e != o:
                    break
            out.append(Request(len(out), int(o), int(e), t))
    return out


# -- demand statistics -----------------------------------------------------------


def demand_counts(requests: Iterable[Request], clusters: ClusterAssignment, horizon: int) -> np.ndarray:
    """Per-epoch per-cluster counts of request origins, shape (horizon, K)."""
    g = np.zeros((horizon, clusters.K))
    for r in requests:
        if 0 <= r.arrival_epoch < horizon:
            g[r.arrival_epoch, clusters[r.origin]] += 1
    return g


def compute_future_demand(g_paths, gamma: float, T: int) -> np.ndarray:
    """Expected discounted future demand per epoch.

    ``g_paths`` has shape (paths, epochs, K) (or (epochs, K) for a single
    path).  Returns F with F[t] = mean over paths of
    sum_{s=0}^{min(T, last-t)} gamma**s * g[t+s].
    """
    g = np.asarray(g_paths, dtype=float)
    if g.ndim == 2:
        g = g[None]
    if g.ndim != 3 or g.shape[0] == 0:
        raise ValueError("need at least one sample path of shape (epochs, K)")
    if T < 0:
        raise ValueError("T must be non-negative")
    mean = g.mean(axis=0)
    n = mean.shape[0]
    F = np.zeros_like(mean)
    w = 1.0
    for s in range(min(T, n - 1) + 1):
        F[: n - s] += w * mean[s:]
        w *= gamma
    return F


@dataclass(frozen=True, eq=False)
class DemandStats:
    """Historical mean demand g and discounted future demand F, both (epochs, K)."""

    g: np.ndarray
    F: np.ndarray
    gamma: float
    T: int

    @classmethod
    def from_paths(cls, paths: Sequence[Sequence[Request]], clusters: ClusterAssignment, horizon: int,
                   gamma: float, T: int) -> "DemandStats":
        g = np.stack([demand_counts(p, clusters, horizon) for p in paths])
        return cls(g.mean(axis=0), compute_future_demand(g, gamma, T), gamma, T)

    @property
    def K(self) -> int:
        return self.g.shape[1]

    @property
    def g_scale(self) -> float:
        return max(1.0, float(self.g.max(initial=0.0)))

    @property
    def F_scale(self) -> float:
        return max(1.0, float(self.F.max(initial=0.0)))

    def future(self, t: int) -> np.ndarray:
        if len(self.F) == 0:
            return np.zeros(self.K)
        return self.F[min(t, len(self.F) - 1)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "cluster", "g", "F"])
            for t in range(self.g.shape[0]):
                for k in range(self.K):
                    w.writerow([t, k, repr(float(self.g[t, k])), repr(float(self.F[t, k]))])

    @classmethod
    def from_csv(cls, path: str | Path, gamma: float, T: int) -> "DemandStats":
        with open(path, newline="") as fh:
            rows = [(int(r["epoch"]), int(r["cluster"]), float(r["g"]), float(r["F"])) for r in csv.DictReader(fh)]
        n = max(r[0] for r in rows) + 1
        K = max(r[1] for r in rows) + 1
        g, F = np.zeros((n, K)), np.zeros((n, K))
        for t, k, gv, fv in rows:
            g[t, k], F[t, k] = gv, fv
        return cls(g, F, gamma, T)
