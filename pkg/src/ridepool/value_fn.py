"""Per-vehicle value of post-decision states: features, network, replay and updates."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ridepool.actions import FeasibleAction
from ridepool.fleet import DROPOFF, Vehicle
from ridepool.matching import Assignment, AssignmentInstance, solve
from ridepool.road_network import ClusterAssignment, RoadNetwork

CHECKPOINT_VERSION = 1
SLACK_PAD = -1.0
SOFTPLUS_FLOOR = -700.0  # keeps softplus output a normal positive double


@dataclass(frozen=True)
class FeatureSpec:
    """Feature layout and normalisation constants.

    Layout: route-end cluster one-hot (K) | free seats / capacity |
    per-request dropoff slack / tau, sorted, padded with -1 (capacity) |
    sin, cos of the epoch's phase in the horizon | other vehicles per
    cluster / fleet size (K) | current demand per cluster / g_scale (K) |
    future demand per cluster / F_scale (K) | route duration / duration_scale.
    The future-demand block is zero when ``use_future_demand`` is off.
    """

    K: int
    capacity: int
    tau: float
    horizon: int
    fleet_size: int
    g_scale: float = 1.0
    F_scale: float = 1.0
    duration_scale: float = 600.0
    use_future_demand: bool = True

    @property
    def length(self) -> int:
        return 4 * self.K + self.capacity + 4


def fleet_cluster_counts(vehicles: Sequence[Vehicle], clusters: ClusterAssignment) -> np.ndarray:
    counts = np.zeros(clusters.K)
    for v in vehicles:
        counts[clusters[v.location]] += 1
    return counts


def _shared_block(spec: FeatureSpec, t: int, others: np.ndarray, g_t: np.ndarray, F_t: np.ndarray) -> np.ndarray:
    phase = 2.0 * math.pi * t / max(spec.horizon, 1)
    future = F_t / spec.F_scale if spec.use_future_demand else np.zeros(spec.K)
    return np.concatenate([
        [math.sin(phase), math.cos(phase)],
        others / max(spec.fleet_size, 1),
        g_t / spec.g_scale,
        future,
    ])


def featurize_actions(
    vehicle: Vehicle,
    actions: Sequence[FeasibleAction],
    fleet_counts: np.ndarray,
    g_t: np.ndarray,
    F_t: np.ndarray,
    t: int,
    now: float,
    spec: FeatureSpec,
    clusters: ClusterAssignment,
    net: RoadNetwork,
) -> np.ndarray:
    """Feature rows, one per action, for the vehicle's post-decision states.

    Other vehicles enter through their pre-decision cluster counts, so
    every row of one vehicle shares that block and the demand blocks.
    """
    K, C = spec.K, spec.capacity
    others = fleet_counts.copy()
    others[clusters[vehicle.location]] -= 1
    shared = _shared_block(spec, t, others, g_t, F_t)
    X = np.zeros((len(actions), spec.length))
    X[:, K + 1 + C:4 * K + C + 3] = shared
    tt, ix = net.tt, net.index
    start_t = now + vehicle.offset
    start = ix[vehicle.location]
    for row, a in enumerate(actions):
        route = a.route
        cur, clock = start, start_t
        slacks = []
        for s in route:
            nxt = ix[s.location]
            clock += tt[cur][nxt]
            cur = nxt
            if s.kind == DROPOFF:
                slacks.append((s.deadline - clock) / spec.tau)
        end_loc = route[-1].location if route else vehicle.location
        X[row, clusters[end_loc]] = 1.0
        seats = vehicle.capacity - len(vehicle.assigned) - len(a.requests)
        X[row, K] = seats / vehicle.capacity
        slacks.sort()
        slacks = slacks[:C] + [SLACK_PAD] * (C - len(slacks))
        X[row, K + 1:K + 1 + C] = slacks
        X[row, -1] = (clock - now) / spec.duration_scale
    return X


def featurize(vehicle: Vehicle, action: FeasibleAction, fleet_counts, g_t, F_t, t, now, spec, clusters, net) -> np.ndarray:
    return featurize_actions(vehicle, [action], fleet_counts, g_t, F_t, t, now, spec, clusters, net)[0]


# -- network -----------------------------------------------------------------------


def softplus(z):
    return np.logaddexp(0.0, np.maximum(z, SOFTPLUS_FLOOR))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class ValueNet:
    """Two-hidden-layer MLP, float64, with softplus (positive) or linear output."""

    def __init__(self, n_in: int, hidden: Sequence[int] = (64, 64), activation: str = "relu",
                 output: str = "softplus", seed: int = 0, spec: FeatureSpec | None = None):
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        if output not in ("softplus", "linear"):
            raise ValueError(f"unknown output {output!r}")
        if spec is not None and spec.length != n_in:
            raise ValueError("feature spec length does not match the input size")
        self.n_in = n_in
        self.hidden = tuple(hidden)
        self.activation = activation
        self.output = output
        self.spec = spec
        rng = np.random.default_rng(seed)
        sizes = (n_in, *self.hidden, 1)
        self.params: list[np.ndarray] = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.params.append(rng.normal(0.0, math.sqrt(2.0 / (a + b)), size=(a, b)))
            self.params.append(np.zeros(b))

    # forward / backward

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, h):
        return (z > 0).astype(float) if self.activation == "relu" else 1.0 - h * h

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ValueError(f"expected features of length {self.n_in}, got shape {np.shape(X)}")
        return X

    def _forward(self, X):
        zs, hs = [], [X]
        h = X
        n_layers = len(self.params) // 2
        for layer in range(n_layers):
            z = h @ self.params[2 * layer] + self.params[2 * layer + 1]
            zs.append(z)
            if layer < n_layers - 1:
                h = self._act(z)
                hs.append(h)
        out = zs[-1][:, 0]
        value = softplus(out) if self.output == "softplus" else out
        return value, (zs, hs)

    def __call__(self, X) -> np.ndarray:
        return evaluate(self, X)

    def loss_and_grad(self, X, y, weights=None) -> tuple[float, list[np.ndarray]]:
        """Mean squared error against targets ``y`` and its gradient."""
        X = self._check(X)
        y = np.asarray(y, dtype=float)
        value, (zs, hs) = self._forward(X)
        n = len(y)
        resid = value - y
        loss = float(np.mean(resid ** 2))
        dv = 2.0 * resid / n
        if self.output == "softplus":
            z = zs[-1][:, 0]
            dv = dv * np.where(z > SOFTPLUS_FLOOR, _sigmoid(z), 0.0)
        dz = dv[:, None]
        grads: list[np.ndarray] = [None] * len(self.params)
        n_layers = len(self.params) // 2
        for layer in reversed(range(n_layers)):
            grads[2 * layer] = hs[layer].T @ dz
            grads[2 * layer + 1] = dz.sum(axis=0)
            if layer > 0:
                dh = dz @ self.params[2 * layer].T
                dz = dh * self._act_grad(zs[layer - 1], hs[layer])
        return loss, grads

    def copy(self) -> "ValueNet":
        other = ValueNet.__new__(ValueNet)
        other.__dict__.update(self.__dict__)
        other.params = [p.copy() for p in self.params]
        return other

    # checkpoint

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "n_in": self.n_in,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "output": self.output,
            "spec": asdict(self.spec) if self.spec else None,
            "params": [{"shape": list(p.shape), "data": p.ravel().tolist()} for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValueNet":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        spec = FeatureSpec(**d["spec"]) if d.get("spec") else None
        net = cls(d["n_in"], d["hidden"], d["activation"], d["output"], spec=spec)
        net.params = [np.array(p["data"], dtype=float).reshape(p["shape"]) for p in d["params"]]
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ValueNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate(net: ValueNet, features) -> np.ndarray | float:
    """Values for one feature vector (returns float) or a batch (returns array)."""
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    value, _ = net._forward(net._check(X))
    return float(value[0]) if single else value


class Adam:
    def __init__(self, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, clip_norm: float | None = 10.0):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.beta1, self.beta2, self.eps, self.clip_norm = beta1, beta2, eps, clip_norm

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- replay ---------------------------------------------------------------------------


@dataclass
class Experience:
    """One epoch's decision problem and the states it provides targets for.

    ``features[i]`` holds vehicle i's action feature rows (row 0 is the null
    action).  ``inputs[i]`` is the post-decision state vehicle i was left in
    by the previous epoch; its value is regressed onto this epoch's target.
    Without ``inputs`` the null rows stand in.
    """

    features: list[np.ndarray]
    rewards: list[np.ndarray]
    requests: list[list[frozenset[int]]]
    epoch: int
    terminal: bool = False
    choice: list[int] | None = None  # action taken while acting, used when targets are not re-solved
    inputs: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.features) == len(self.rewards) == len(self.requests)):
            raise ValueError("experience tables disagree on the number of vehicles")
        if self.inputs is not None and len(self.inputs) != len(self.features):
            raise ValueError("one regression input per vehicle is required")

    @property
    def regression_inputs(self) -> np.ndarray:
        if self.inputs is not None:
            return np.asarray(self.inputs, dtype=float)
        return np.vstack([f[0] for f in self.features])


class ReplayMemory:
    """Bounded FIFO of experiences with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity <= 0:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._items: deque[Experience] = deque(maxlen=capacity)
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, exp: Experience) -> None:
        self._items.append(exp)

    def sample(self, n: int) -> list[Experience]:
        n = min(n, len(self._items))
        idx = self._rng.choice(len(self._items), size=n, replace=False)
        return [self._items[int(i)] for i in sorted(idx)]

    def __iter__(self):
        return iter(self._items)


Solver = Callable[[AssignmentInstance], Assignment]


def default_solver(inst: AssignmentInstance) -> Assignment:
    return solve(inst)


def experience_targets(target_net: ValueNet, exp: Experience, solver: Solver | None, gamma: float) -> np.ndarray:
    """Per-vehicle targets J + gamma * V(chosen post-decision state).

    The choice comes from re-solving the experience's ILP under the target
    network, or from the stored acting choice when ``solver`` is None.
    """
    sizes = [len(f) for f in exp.features]
    if gamma == 0.0:
        values = [np.zeros(s) for s in sizes]
    else:
        flat = evaluate(target_net, np.vstack(exp.features))
        values = np.split(flat, np.cumsum(sizes)[:-1])
    if solver is None:
        if exp.choice is None:
            raise ValueError("experience has no stored choice to reuse")
        choice = exp.choice
    else:
        scores = [r + gamma * v for r, v in zip(exp.rewards, values)]
        choice = solver(AssignmentInstance(tuple(map(tuple, scores)), tuple(map(tuple, exp.requests)))).choice
    future = 0.0 if exp.terminal else gamma
    return np.array([exp.rewards[i][c] + future * values[i][c] for i, c in enumerate(choice)])


def train_step(net: ValueNet, batch: Sequence[Experience], solver: Solver | None, gamma: float, lr: float,
               target_net: ValueNet | None = None, optimizer: Adam | None = None) -> float:
    """One gradient step on the squared Bellman error over all (experience, vehicle) pairs."""
    if not batch:
        raise ValueError("empty minibatch")
    target_net = net if target_net is None else target_net
    xs, ys = [], []
    for exp in batch:
        ys.append(experience_targets(target_net, exp, solver, gamma))
        xs.append(exp.regression_inputs)
    X, y = np.vstack(xs), np.concatenate(ys)
    loss, grads = net.loss_and_grad(X, y)
    if optimizer is None:
        for p, g in zip(net.params, grads):
            p -= lr * g
    else:
        optimizer.step(net.params, grads, lr)
    return loss


def action_values(net: ValueNet | None, feature_sets: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Evaluate every vehicle's action rows in one batch."""
    sizes = [len(f) for f in feature_sets]
    if net is None or not sizes:
        return [np.zeros(s) for s in sizes]
    flat = evaluate(net, np.vstack(feature_sets))
    return np.split(flat, np.cumsum(sizes)[:-1])
