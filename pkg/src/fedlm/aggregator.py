"""Server side of a federated round: sampling, pseudo-gradient, outer step, accounting, checkpoints."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from fedlm.checkpoint import read_checkpoint, write_checkpoint
from fedlm.client import Client, ClientResult
from fedlm.costmodel import (
    BandwidthMatrix,
    CostModelParams,
    Topology,
    agg_time,
    comm_time,
    local_time,
    megabytes_per_round,
    MB_BYTES,
)
from fedlm.data import StreamCursor
from fedlm.errors import ConfigError, ContractError, RoundFailure
from fedlm.optim import PseudoGradient, ServerOptKind, ServerOptState, server_step
from fedlm.tensor import ParamVector

_SAMPLE_TAG = 0x5A3

CHECKPOINT_NAME = "latest.phck"


@dataclass(frozen=True)
class FederationConfig:
    """``participation`` (a fraction of the population) overrides ``clients_per_round``."""

    population: int
    clients_per_round: int
    rounds: int
    local_steps: int
    topology: Topology = Topology.PS
    server_opt: ServerOptKind = ServerOptKind.FEDAVG
    server_lr: float = 1.0
    server_momentum: float = 0.0
    nesterov: bool = False
    seed: int = 0
    participation: float | None = None
    workers: int = 1
    ring: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "topology", Topology(self.topology))
        object.__setattr__(self, "server_opt", ServerOptKind(self.server_opt))
        if self.population < 1:
            raise ConfigError("population must be >= 1")
        if self.participation is not None:
            if not 0.0 < self.participation <= 1.0:
                raise ConfigError("participation must lie in (0, 1]")
            k = round(self.participation * self.population)
            if k < 1:
                raise ConfigError(
                    f"participation {self.participation} of {self.population} clients rounds to 0"
                )
            object.__setattr__(self, "clients_per_round", int(k))
        if not 1 <= self.clients_per_round <= self.population:
            raise ConfigError(
                f"clients_per_round must lie in [1, {self.population}], got {self.clients_per_round}"
            )
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_steps < 0:
            raise ConfigError("local_steps must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.ring is not None and sorted(self.ring) != list(range(self.population)):
            raise ConfigError("ring must be a permutation of the client ids")
        self.make_server_state()

    def make_server_state(self) -> ServerOptState:
        return ServerOptState(
            kind=self.server_opt,
            lr=self.server_lr,
            momentum=self.server_momentum,
            nesterov=self.nesterov,
        )


@dataclass
class RoundRecord:
    round: int
    sampled_ids: list[int]
    survivor_ids: list[int]
    mean_client_loss: float
    min_client_loss: float
    max_client_loss: float
    eval_ppl: float
    t_local_s: float
    t_comm_s: float
    t_agg_s: float
    t_cum_s: float
    bytes_round: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FederationState:
    theta: ParamVector
    server: ServerOptState
    round: int = 0
    cursors: dict[int, tuple[StreamCursor, ...]] = field(default_factory=dict)
    t_cum: float = 0.0
    records: list[RoundRecord] = field(default_factory=list)


def sample_clients(population: int, k: int, seed: int, round: int) -> list[int]:
    """Uniform sample of ``k`` distinct ids from ``range(population)``, ascending."""
    if not 1 <= k <= population:
        raise ConfigError(f"cannot sample {k} of {population} clients")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(round), _SAMPLE_TAG]))
    return sorted(int(i) for i in rng.choice(population, size=k, replace=False))


def compute_pseudo_gradient(
    theta: ParamVector, client_models: Mapping[int, ParamVector]
) -> PseudoGradient:
    """``delta = mean_k (theta - theta_k)`` summed in ascending client-id order."""
    if not client_models:
        raise ContractError("no client models to aggregate")
    ids = sorted(client_models)
    models = [client_models[i] for i in ids]
    for m in models:
        theta.check_compatible(m)
    delta = ParamVector.mean([theta - m for m in models])
    return PseudoGradient(delta, ParamVector.mean(models), theta.tobytes())


def ring_order(sampled: Sequence[int], ring: Sequence[int] | None) -> list[int]:
    """Sampled ids arranged along the configured ring (ascending ids by default)."""
    if ring is None:
        return sorted(sampled)
    position = {cid: i for i, cid in enumerate(ring)}
    return sorted(sampled, key=position.__getitem__)


def _sites(members: Sequence[int], matrix: BandwidthMatrix) -> list[int]:
    # client c is hosted at site c mod n_sites
    return [c % len(matrix.names) for c in members]


def round_costs(
    config: FederationConfig, cost: CostModelParams, sampled: Sequence[int]
) -> tuple[float, float, float, float]:
    """(T_L, T_C, T_agg, bytes) of one round under the configured topology."""
    k = len(sampled)
    ring = None
    if config.topology is Topology.RAR and cost.matrix is not None:
        ring = _sites(ring_order(sampled, config.ring), cost.matrix)
    t_l = local_time(config.local_steps, cost.throughput)
    t_c = comm_time(
        config.topology,
        k,
        cost.payload_mb,
        cost.bandwidth_mbps,
        matrix=cost.matrix if config.topology is Topology.RAR else None,
        ring=ring,
        channel_threshold=cost.channel_threshold,
    )
    t_a = agg_time(k, cost.payload_mb, cost.server_flops)
    return t_l, t_c, t_a, megabytes_per_round(config.topology, k, cost.payload_mb) * MB_BYTES


def _train_all(
    clients: Mapping[int, Client],
    ids: Sequence[int],
    theta: ParamVector,
    state: FederationState,
    config: FederationConfig,
) -> dict[int, ClientResult]:
    def task(cid: int) -> ClientResult:
        return clients[cid].train(
            theta,
            config.local_steps,
            round=state.round,
            step_offset=state.round * config.local_steps,
            cursors=state.cursors.get(cid),
        )

    outcomes: dict[int, ClientResult | BaseException] = {}
    if config.workers == 1 or len(ids) == 1:
        for cid in ids:
            try:
                outcomes[cid] = task(cid)
            except Exception as exc:  # collected; other clients still finish
                outcomes[cid] = exc
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = {cid: pool.submit(task, cid) for cid in ids}
            for cid, fut in futures.items():
                exc = fut.exception()
                outcomes[cid] = exc if exc is not None else fut.result()
    for cid in ids:
        if isinstance(outcomes[cid], BaseException):
            raise outcomes[cid]
    return outcomes  # type: ignore[return-value]


def run_round(
    state: FederationState,
    config: FederationConfig,
    clients: Mapping[int, Client],
    cost: CostModelParams,
    *,
    evaluate: Callable[[ParamVector], float] | None = None,
    dropouts: Iterable[int] = (),
    checkpoint_dir: str | Path | None = None,
) -> tuple[ParamVector, RoundRecord]:
    """One round: sample, train, aggregate survivors, server step, account, checkpoint.

    Advances ``state`` in place and returns the new global model with its record.
    """
    theta = state.theta
    sampled = sample_clients(config.population, config.clients_per_round, config.seed, state.round)
    dropped = set(dropouts) & set(sampled)
    survivors = [c for c in sampled if c not in dropped]
    if dropped and config.topology is Topology.RAR:
        raise RoundFailure(
            f"round {state.round}: ring all-reduce cannot complete without clients {sorted(dropped)}"
        )
    if not survivors:
        raise RoundFailure(f"round {state.round}: every sampled client dropped out")

    results = _train_all(clients, survivors, theta, state, config)
    pseudo = compute_pseudo_gradient(theta, {c: results[c].theta for c in survivors})
    new_theta = server_step(state.server, theta, pseudo, state.round)

    t_l, t_c, t_a, n_bytes = round_costs(config, cost, sampled)
    state.t_cum += t_l + t_c
    losses = [results[c].mean_loss for c in survivors]
    record = RoundRecord(
        round=state.round,
        sampled_ids=list(sampled),
        survivor_ids=survivors,
        mean_client_loss=math.fsum(losses) / len(losses),
        min_client_loss=min(losses),
        max_client_loss=max(losses),
        eval_ppl=evaluate(new_theta) if evaluate is not None else float("nan"),
        t_local_s=t_l,
        t_comm_s=t_c,
        t_agg_s=t_a,
        t_cum_s=state.t_cum,
        bytes_round=n_bytes,
    )
    for c in survivors:
        state.cursors[c] = results[c].cursor
    state.theta = new_theta
    state.round += 1
    state.records.append(record)
    if checkpoint_dir is not None:
        checkpoint_global(state, Path(checkpoint_dir) / CHECKPOINT_NAME)
    return new_theta, record


def checkpoint_global(state: FederationState, path: str | Path) -> None:
    """Atomically persist everything needed to continue the run bit-identically."""
    meta = {
        "kind": "federation",
        "next_round": state.round,
        "t_cum": state.t_cum,
        "cursors": {str(c): [x.to_list() for x in cur] for c, cur in sorted(state.cursors.items())},
        "records": [r.to_dict() for r in state.records],
        "server": {
            "kind": state.server.kind.value,
            "lr": state.server.lr,
            "momentum": state.server.momentum,
            "nesterov": state.server.nesterov,
        },
    }
    extras = {"velocity": state.server.velocity} if state.server.velocity is not None else None
    write_checkpoint(state.theta, meta, path, round=state.round, extras=extras)


def restore_global(path: str | Path) -> FederationState:
    ckpt = read_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "federation":
        raise ConfigError(f"{path} is not a federation checkpoint")
    server = ServerOptState(**meta["server"], velocity=ckpt.extras.get("velocity"))
    cursors = {
        int(c): tuple(StreamCursor.from_list(x) for x in cur) for c, cur in meta["cursors"].items()
    }
    return FederationState(
        theta=ckpt.params,
        server=server,
        round=int(meta["next_round"]),
        cursors=cursors,
        t_cum=float(meta["t_cum"]),
        records=[RoundRecord(**r) for r in meta["records"]],
    )


def run_federation(
    state: FederationState,
    config: FederationConfig,
    clients: Mapping[int, Client],
    cost: CostModelParams,
    *,
    evaluate: Callable[[ParamVector], float] | None = None,
    checkpoint_dir: str | Path | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
    stop_after: int | None = None,
) -> FederationState:
    """Run rounds from ``state.round`` up to ``config.rounds`` (or ``stop_after`` rounds)."""
    done = 0
    while state.round < config.rounds and (stop_after is None or done < stop_after):
        _, record = run_round(
            state, config, clients, cost, evaluate=evaluate, checkpoint_dir=checkpoint_dir
        )
        done += 1
        if on_round is not None:
            on_round(record)
    return state
