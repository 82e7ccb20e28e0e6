"""Reference trainers: simulated data-parallel (DDP) training and the DiLoCo outer-optimizer preset."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

from fedlm.aggregator import FederationConfig
from fedlm.client import LocalTrainConfig, training_step
from fedlm.costmodel import CostModelParams, Topology, comm_time
from fedlm.data import BatchStream, ShardPlan, StreamCursor
from fedlm.errors import ConfigError, DivergenceError, NumericError
from fedlm.model import ModelConfig, loss_and_grad
from fedlm.optim import ServerOptKind, adamw_step, lr_at, sgd_step
from fedlm.tensor import ParamVector

DILOCO_SERVER_LR = 0.1
DILOCO_MOMENTUM = 0.9
DILOCO_MOMENTUM_ALT = 0.7


@dataclass(frozen=True)
class CentralizedConfig:
    """``n_workers`` simulated ranks share one update per step; each rank draws
    ``global_batch / n_workers`` sequences from its own shard (plan client ``w``).

    ``reset_optimizer_every`` discards the AdamW moments every that many steps,
    which reproduces the optimizer lifetime of stateless federated rounds.
    """

    n_workers: int = 1
    global_batch: int = 8
    steps: int = 1
    hp: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    reset_optimizer_every: int | None = None

    def __post_init__(self):
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.global_batch < 1 or self.global_batch % self.n_workers:
            raise ConfigError(
                f"global batch {self.global_batch} is not divisible by {self.n_workers} workers"
            )
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.reset_optimizer_every is not None and self.reset_optimizer_every < 1:
            raise ConfigError("reset_optimizer_every must be >= 1")

    @property
    def worker_batch(self) -> int:
        return self.global_batch // self.n_workers


@dataclass
class CentralizedResult:
    theta: ParamVector
    losses: list[float]
    sync_events: int
    sim_time_s: float
    trajectory: list[ParamVector] = field(default_factory=list)
    eval_ppl: list[tuple[int, float]] = field(default_factory=list)
    cursors: tuple[StreamCursor, ...] = ()


def ddp_step_time(cost: CostModelParams, n_workers: int) -> float:
    """One step of compute plus a ring all-reduce of the gradient."""
    comm = comm_time(Topology.RAR, n_workers, cost.payload_mb, cost.bandwidth_mbps)
    return 1.0 / cost.throughput + comm


def run_centralized(
    config: CentralizedConfig,
    plan: ShardPlan,
    model_cfg: ModelConfig,
    seed: int,
    theta0: ParamVector,
    *,
    cost: CostModelParams | None = None,
    keep_trajectory: bool = False,
    evaluate: Callable[[ParamVector], float] | None = None,
    eval_every: int = 0,
) -> CentralizedResult:
    """Synchronous data-parallel training: per step, average the worker gradients in
    rank order and apply one shared optimizer update."""
    hp = config.hp
    if plan.n_clients < config.n_workers:
        raise ConfigError(f"plan has {plan.n_clients} shards for {config.n_workers} workers")
    streams = [
        BatchStream(plan, w, config.worker_batch, model_cfg.seq_len, seed)
        for w in plan.client_ids[: config.n_workers]
    ]
    theta = theta0.copy()
    state = None
    losses: list[float] = []
    trajectory: list[ParamVector] = []
    evals: list[tuple[int, float]] = []
    for k in range(1, config.steps + 1):
        if hp.optimizer == "adamw" and (
            state is None
            or (config.reset_optimizer_every and (k - 1) % config.reset_optimizer_every == 0)
        ):
            state = hp.fresh_state(theta)
        context = {"step": k}
        if config.n_workers == 1:
            theta, loss = training_step(theta, next(streams[0]), model_cfg, hp, state, k, {})
        else:
            worker_losses, grads = [], []
            for s in streams:
                try:
                    l, g = loss_and_grad(theta, next(s), model_cfg)
                except NumericError as exc:
                    raise DivergenceError("training diverged", **context) from exc
                worker_losses.append(l)
                grads.append(g)
            loss = math.fsum(worker_losses) / len(worker_losses)
            if not math.isfinite(loss):
                raise DivergenceError("training diverged: non-finite loss", **context)
            grad = ParamVector.mean(grads)
            lr = lr_at(hp.schedule, k)
            try:
                if hp.optimizer == "sgd":
                    theta = sgd_step(theta, grad, lr, context=context)
                else:
                    theta = adamw_step(theta, grad, state, lr, context=context)
            except NumericError as exc:
                raise DivergenceError("training diverged: non-finite gradient", **context) from exc
        losses.append(loss)
        if keep_trajectory:
            trajectory.append(theta)
        if evaluate is not None and eval_every and k % eval_every == 0:
            evals.append((k, evaluate(theta)))
    sim = config.steps * ddp_step_time(cost, config.n_workers) if cost is not None else 0.0
    return CentralizedResult(
        theta=theta,
        losses=losses,
        sync_events=config.steps,
        sim_time_s=sim,
        trajectory=trajectory,
        eval_ppl=evals,
        cursors=tuple(s.cursor for s in streams),
    )


def diloco_config(
    base: FederationConfig,
    *,
    server_lr: float = DILOCO_SERVER_LR,
    momentum: float = DILOCO_MOMENTUM,
) -> FederationConfig:
    """The base federation with SGD + Nesterov momentum as the outer optimizer."""
    return dataclasses.replace(
        base,
        server_opt=ServerOptKind.FEDMOMENTUM,
        server_lr=server_lr,
        server_momentum=momentum,
        nesterov=True,
    )
