"""Value-function training: act through the ILP with noisy scores, replay, regress on re-solved targets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ridepool.demand import Request
from ridepool.simulator import (
    Scenario,
    SimConfig,
    _batches,
    advance_fleet,
    apply_decision,
    decide,
    initial_fleet,
)
from ridepool.value_fn import Adam, Experience, ReplayMemory, ValueNet, default_solver, train_step

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: ValueNet, path: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.path = path


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 50
    noise_sigma: float = 0.1
    update_frequency: int = 2
    batch_size: int = 8
    learning_rate: float = 1e-3
    replay_capacity: int = 2000
    target_sync: int = 20
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    seed: int = 0
    resolve_targets: bool = True
    clip_norm: float | None = 10.0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    served: list[int] = field(default_factory=list)


def new_value_net(scenario: Scenario, config: SimConfig, train: TrainConfig, variant: str = "neuradp+") -> ValueNet:
    """Fresh network; ``neuradp`` drops the future-demand block and the softplus output."""
    if variant not in ("neuradp", "neuradp+"):
        raise ValueError(f"unknown network variant {variant!r}")
    plus = variant == "neuradp+"
    spec = scenario.feature_spec(config, use_future_demand=plus)
    return ValueNet(spec.length, train.hidden, train.activation, "softplus" if plus else "linear",
                    seed=train.seed, spec=spec)


def train(
    scenario: Scenario,
    config: SimConfig,
    paths: Sequence[Sequence[Request]],
    train_cfg: TrainConfig = TrainConfig(),
    variant: str = "neuradp+",
    net: ValueNet | None = None,
    log: TrainLog | None = None,
    checkpoint_path: str | Path | None = None,
) -> ValueNet:
    """Run ``train_cfg.episodes`` episodes of act / store / replay-update and return the network.

    Acting uses the plain (lambda = 0) value scores, as the network is fitted
    before the neighbour-blending parameters are searched.
    """
    if not paths and train_cfg.episodes > 0:
        raise ValueError("training needs at least one demand sample path")
    net = new_value_net(scenario, config, train_cfg, variant) if net is None else net
    acting_cfg = SimConfig(**{**config.__dict__, "mode": "neuradp+" if variant == "neuradp+" else "neuradp",
                              "lam": 0.0, "alpha": 0.0})
    target = net.copy()
    opt = Adam(net.params, clip_norm=train_cfg.clip_norm)
    memory = ReplayMemory(train_cfg.replay_capacity, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    steps = 0
    for episode in range(train_cfg.episodes):
        path = paths[episode % len(paths)]
        batches = _batches(path, config.horizon)
        vehicles = initial_fleet(scenario.net, config.fleet_size, config.capacity,
                                 int(rng.integers(2**31)))
        served = 0
        previous = None  # post-decision feature rows chosen in the last epoch
        for batch in batches[: config.horizon]:
            t = batch.epoch
            decision = decide(vehicles, batch, scenario, acting_cfg, net, noise_sigma=train_cfg.noise_sigma, rng=rng)
            choice = decision.assignment.choice
            if previous is not None:
                memory.add(Experience(
                    features=decision.features,
                    rewards=[np.array([a.reward for a in s.actions], dtype=float) for s in decision.action_sets],
                    requests=[[a.request_ids for a in s.actions] for s in decision.action_sets],
                    epoch=t,
                    terminal=t == config.horizon - 1,
                    choice=list(choice),
                    inputs=previous,
                ))
            previous = np.vstack([f[c] for f, c in zip(decision.features, choice)]) if choice else None
            if len(memory) and t % train_cfg.update_frequency == 0:
                batch_exp = memory.sample(train_cfg.batch_size)
                solver = default_solver if train_cfg.resolve_targets else None
                loss = train_step(net, batch_exp, solver, config.gamma, train_cfg.learning_rate,
                                  target_net=target, optimizer=opt)
                if not math.isfinite(loss) or not all(np.isfinite(p).all() for p in net.params):
                    path_out = Path(checkpoint_path) if checkpoint_path else None
                    if path_out is not None:
                        target.save(path_out)
                    raise TrainingDiverged(f"loss became {loss} at episode {episode}, epoch {t}", target, path_out)
                steps += 1
                if log is not None:
                    log.losses.append(loss)
                if steps % train_cfg.target_sync == 0:
                    target = net.copy()
            served += sum(decision.action_sets[i].actions[c].reward for i, c in enumerate(choice))
            vehicles = advance_fleet(apply_decision(vehicles, decision), scenario.net, config.delta,
                                     t * config.delta)
        if log is not None:
            log.served.append(served)
        logger.debug("episode %d served %d", episode, served)
    if checkpoint_path is not None:
        net.save(checkpoint_path)
    return net
