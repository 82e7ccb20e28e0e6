"""Client-side work of one round: strategy choice, tau local steps, sub-federation, post-processing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from fedlm.checkpoint import read_checkpoint, write_checkpoint
from fedlm.data import BatchStream, ShardPlan, StreamCursor, split_client
from fedlm.errors import CapacityError, ConfigError, DivergenceError, NumericError
from fedlm.model import ModelConfig, loss_and_grad
from fedlm.optim import AdamWState, LrSchedule, adamw_step, lr_at, sgd_step
from fedlm.tensor import ParamVector

MB = 2**20
VRAM_HEADROOM = 0.9
MAX_LOCAL_BATCH = 32
BYTES_PER_VALUE = 8


class Interconnect(str, Enum):
    RDMA = "rdma"
    LOW_BANDWIDTH = "low_bandwidth"


class StrategyKind(str, Enum):
    SINGLE_GPU = "single_gpu"
    DDP = "ddp"
    FSDP = "fsdp"
    SUB_FEDERATION = "sub_federation"


@dataclass(frozen=True)
class ClientHardware:
    """Compute available to one client. ``model_mem_estimate`` covers weights,
    gradients and optimizer moments (see :func:`model_memory_mb`)."""

    n_nodes: int = 1
    gpus_per_node: int = 1
    vram_per_gpu: float = 80_000.0
    interconnect: Interconnect = Interconnect.RDMA
    model_mem_estimate: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "interconnect", Interconnect(self.interconnect))
        if self.n_nodes < 1 or self.gpus_per_node < 1:
            raise ConfigError("node and GPU counts must be >= 1")
        if not self.vram_per_gpu > 0:
            raise ConfigError("vram_per_gpu must be > 0")
        if not self.model_mem_estimate > 0:
            raise ConfigError("model_mem_estimate must be > 0")

    @property
    def usable_gpu_mb(self) -> float:
        return VRAM_HEADROOM * self.vram_per_gpu


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    batch_sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ConfigError("every node needs a batch size >= 1")


def model_memory_mb(n_params: int) -> float:
    """Weights + gradients + two AdamW moments in f64."""
    return 4 * n_params * BYTES_PER_VALUE / MB


def activation_bytes_per_sample(cfg: ModelConfig) -> int:
    """Rough count of saved forward values for one sequence, in bytes."""
    t, d, f, h, v = cfg.seq_len, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size
    per_block = 10 * d + 2 * f + h * t
    return BYTES_PER_VALUE * t * (cfg.n_blocks * per_block + 2 * d + 2 * v)


def calc_batch_size(
    hw: ClientHardware,
    model_cfg: ModelConfig,
    max_batch: int = MAX_LOCAL_BATCH,
    shards: int = 1,
) -> int:
    """Largest power of two <= ``max_batch`` whose memory fits 90% of one GPU; at least 1.

    ``shards`` divides the static model footprint (FSDP).
    """
    if max_batch < 1:
        raise ConfigError("max_batch must be >= 1")
    capacity = hw.usable_gpu_mb * MB
    static = hw.model_mem_estimate * MB / shards
    per_sample = activation_bytes_per_sample(model_cfg)
    b = 1 << (int(max_batch).bit_length() - 1)
    while b > 1 and static + b * per_sample > capacity:
        b //= 2
    return b


def _node_strategy(hw: ClientHardware) -> StrategyKind:
    if hw.model_mem_estimate <= hw.usable_gpu_mb:
        return StrategyKind.SINGLE_GPU if hw.gpus_per_node == 1 else StrategyKind.DDP
    if hw.gpus_per_node > 1 and hw.model_mem_estimate <= hw.usable_gpu_mb * hw.gpus_per_node:
        return StrategyKind.FSDP
    raise CapacityError(
        f"model needs {hw.model_mem_estimate:.1f} MB; a node offers "
        f"{hw.usable_gpu_mb * hw.gpus_per_node:.1f} MB usable"
    )


def select_strategy(
    hw: ClientHardware, model_cfg: ModelConfig | None = None, max_batch: int = MAX_LOCAL_BATCH
) -> Strategy:
    """Pick how a client trains on its hardware.

    Low-bandwidth multi-node clients form a sub-federation (each node holds a
    full replica). Otherwise: one GPU -> SingleGPU; several GPUs -> DDP when a
    replica fits one GPU, FSDP when it only fits sharded.
    """
    if hw.n_nodes > 1 and hw.interconnect is Interconnect.LOW_BANDWIDTH:
        node_kind = _node_strategy(hw)
        kind = StrategyKind.SUB_FEDERATION
        n_batches = hw.n_nodes
    else:
        gpus = hw.n_nodes * hw.gpus_per_node
        pooled = ClientHardware(1, gpus, hw.vram_per_gpu, hw.interconnect, hw.model_mem_estimate)
        node_kind = kind = _node_strategy(pooled)
        n_batches = 1
        hw = pooled
    if model_cfg is None:
        per_node = 1
    else:
        shards = hw.gpus_per_node if node_kind is StrategyKind.FSDP else 1
        per_gpu = calc_batch_size(hw, model_cfg, max_batch, shards)
        per_node = per_gpu if node_kind is StrategyKind.SINGLE_GPU else per_gpu * hw.gpus_per_node
    return Strategy(kind, (per_node,) * n_batches)


@dataclass(frozen=True)
class LocalTrainConfig:
    """Client optimizer settings. ``optimizer="sgd"`` is the plain-SGD override
    (no momentum, weight decay or clipping)."""

    schedule: LrSchedule = field(default_factory=LrSchedule)
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    batch_size: int = 8
    throughput: float = 2.0

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown client optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.throughput > 0:
            raise ConfigError("throughput must be > 0")

    def fresh_state(self, params: ParamVector) -> AdamWState:
        return AdamWState.fresh(
            params,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
        )


@dataclass
class ClientResult:
    client_id: int
    theta: ParamVector
    losses: list[float]
    tokens: list[int]
    step_times: list[float]
    cursor: tuple[StreamCursor, ...]

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def mean_loss(self) -> float:
        return math.fsum(self.losses) / len(self.losses) if self.losses else float("nan")


def training_step(
    theta: ParamVector,
    batch,
    model_cfg: ModelConfig,
    hp: LocalTrainConfig,
    state: AdamWState | None,
    step: int,
    context: dict,
) -> tuple[ParamVector, float]:
    """Forward/backward on one batch and one optimizer update at sequential step ``step`` (1-based)."""
    try:
        loss, grads = loss_and_grad(theta, batch, model_cfg)
    except NumericError as exc:
        raise DivergenceError(f"training diverged: {exc.args[0]}", step=step, **context) from exc
    if not math.isfinite(loss):
        raise DivergenceError("training diverged: non-finite loss", step=step, **context)
    lr = lr_at(hp.schedule, step)
    ctx = dict(context, step=step)
    try:
        if hp.optimizer == "sgd":
            theta = sgd_step(theta, grads, lr, context=ctx)
        else:
            theta = adamw_step(theta, grads, state, lr, context=ctx)
    except NumericError as exc:
        raise DivergenceError("training diverged: non-finite gradient", **ctx) from exc
    return theta, loss


def run_local_round(
    theta: ParamVector,
    stream: BatchStream,
    tau: int,
    hp: LocalTrainConfig,
    model_cfg: ModelConfig,
    *,
    round: int = 0,
    client_id: int = 0,
    step_offset: int = 0,
) -> ClientResult:
    """``tau`` optimizer steps from ``theta`` with fresh optimizer state.

    Step ``j`` (1-based) uses the learning rate of sequential step ``step_offset + j``.
    """
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    state = hp.fresh_state(theta) if hp.optimizer == "adamw" else None
    context = {"round": round, "client": client_id}
    losses, tokens, times = [], [], []
    current = theta
    for j in range(1, tau + 1):
        batch = next(stream)
        current, loss = training_step(current, batch, model_cfg, hp, state, step_offset + j, context)
        losses.append(loss)
        tokens.append(batch.n_tokens)
        times.append(1.0 / hp.throughput)
    if tau == 0:
        current = theta.copy()
    return ClientResult(client_id, current, losses, tokens, times, (stream.cursor,))


def run_sub_federation(
    theta: ParamVector,
    node_streams: Sequence[BatchStream],
    tau: int,
    hp: LocalTrainConfig,
    model_cfg: ModelConfig,
    *,
    round: int = 0,
    client_id: int = 0,
    step_offset: int = 0,
) -> ClientResult:
    """Each node trains from ``theta`` on its own stream; the client update is the
    uniform node average. Per-step loss is the node mean, tokens are summed and
    step time is the slowest node's."""
    if not node_streams:
        raise ConfigError("a sub-federation needs at least one node")
    results = [
        run_local_round(
            theta, s, tau, hp, model_cfg, round=round, client_id=client_id, step_offset=step_offset
        )
        for s in node_streams
    ]
    if len(results) == 1:
        return results[0]
    n = len(results)
    losses = [math.fsum(r.losses[j] for r in results) / n for j in range(tau)]
    tokens = [sum(r.tokens[j] for r in results) for j in range(tau)]
    times = [max(r.step_times[j] for r in results) for j in range(tau)]
    return ClientResult(
        client_id,
        ParamVector.mean([r.theta for r in results]),
        losses,
        tokens,
        times,
        tuple(r.cursor[0] for r in results),
    )


@dataclass(frozen=True)
class PostProcessPolicy:
    """``identity`` or ``clip_update`` (rescale ``theta_k - theta_t`` to norm <= ``max_norm``)."""

    kind: str = "identity"
    max_norm: float | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "clip_update"):
            raise ConfigError(f"unknown post-process policy {self.kind!r}")
        if self.kind == "clip_update" and not (self.max_norm and self.max_norm > 0):
            raise ConfigError("clip_update needs max_norm > 0")


def post_process(
    theta_k: ParamVector,
    metrics: ClientResult | None,
    policy: PostProcessPolicy,
    reference: ParamVector | None = None,
) -> ParamVector:
    if policy.kind == "identity":
        return theta_k
    if reference is None:
        raise ConfigError("clip_update needs the round's starting parameters")
    update = theta_k - reference
    norm = update.norm()
    if norm <= policy.max_norm:
        return theta_k
    return reference + update * (policy.max_norm / norm)


def node_seed(seed: int, client_id: int) -> int:
    """Stream seed for the nodes of one client's sub-federation."""
    return int(np.random.SeedSequence([int(seed), int(client_id), 0x5B]).generate_state(1)[0])


class Client:
    """One federated participant: its shard, hardware, strategy and stream positions."""

    def __init__(
        self,
        client_id: int,
        plan: ShardPlan,
        model_cfg: ModelConfig,
        hp: LocalTrainConfig,
        seed: int,
        hardware: ClientHardware | None = None,
        policy: PostProcessPolicy | None = None,
    ):
        self.client_id = client_id
        self.model_cfg = model_cfg
        self.hp = hp
        self.seed = int(seed)
        self.hardware = hardware or ClientHardware()
        self.policy = policy or PostProcessPolicy()
        self.strategy = select_strategy(self.hardware)
        if self.strategy.kind is StrategyKind.SUB_FEDERATION:
            self.plan = split_client(plan, client_id, self.hardware.n_nodes, seed)
            self.stream_ids = list(self.plan.client_ids)
            self.stream_seed = node_seed(seed, client_id)
        else:
            self.plan = plan
            self.stream_ids = [client_id]
            self.stream_seed = self.seed
        plan.ranges(client_id)

    def streams(self, cursors: Sequence[StreamCursor] | None) -> list[BatchStream]:
        cursors = cursors or [StreamCursor()] * len(self.stream_ids)
        if len(cursors) != len(self.stream_ids):
            raise ConfigError(
                f"client {self.client_id} expects {len(self.stream_ids)} stream cursors"
            )
        return [
            BatchStream(
                self.plan, sid, self.hp.batch_size, self.model_cfg.seq_len, self.stream_seed, c
            )
            for sid, c in zip(self.stream_ids, cursors)
        ]

    def train(
        self,
        theta: ParamVector,
        tau: int,
        *,
        round: int,
        step_offset: int,
        cursors: Sequence[StreamCursor] | None = None,
    ) -> ClientResult:
        streams = self.streams(cursors)
        kw = dict(round=round, client_id=self.client_id, step_offset=step_offset)
        if self.strategy.kind is StrategyKind.SUB_FEDERATION:
            result = run_sub_federation(theta, streams, tau, self.hp, self.model_cfg, **kw)
        else:
            result = run_local_round(theta, streams[0], tau, self.hp, self.model_cfg, **kw)
        result.theta = post_process(result.theta, result, self.policy, theta)
        return result


def save_client_checkpoint(result: ClientResult, round: int, path: str | Path) -> None:
    meta = {
        "client_id": result.client_id,
        "cursors": [c.to_list() for c in result.cursor],
        "losses": result.losses,
    }
    write_checkpoint(result.theta, meta, path, round=round)


def load_client_checkpoint(path: str | Path) -> tuple[ParamVector, tuple[StreamCursor, ...], dict]:
    ckpt = read_checkpoint(path)
    cursors = tuple(StreamCursor.from_list(c) for c in ckpt.meta.get("cursors", []))
    return ckpt.params, cursors, ckpt.meta
