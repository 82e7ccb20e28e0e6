"""Client-side AdamW / SGD with warmup+cosine schedule, and server-side outer optimizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from fedlm.errors import ConfigError, ContractError, NumericError
from fedlm.tensor import ParamVector

# Chinchilla-style token budget per parameter.
TOKENS_PER_PARAM = 20


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``lr_max`` then cosine decay to ``alpha * lr_max`` over ``decay_steps``."""

    lr_max: float = 6.0e-4
    warmup_steps: int = 0
    decay_steps: int = 1
    alpha: float = 0.1

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.decay_steps < 1:
            raise ConfigError("decay_steps must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.lr_max < 0:
            raise ConfigError("lr_max must be >= 0")

    @property
    def lr_min(self) -> float:
        return self.alpha * self.lr_max


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a cumulative sequential step index.

    Training code uses ``lr_at(s, k)`` for the k-th step (1-based), so the first
    warmup step already has a non-zero rate and step ``warmup_steps`` hits the peak.
    """
    if step < schedule.warmup_steps:
        return schedule.lr_max * step / schedule.warmup_steps
    progress = min(max((step - schedule.warmup_steps) / schedule.decay_steps, 0.0), 1.0)
    lr_min = schedule.lr_min
    # written from the peak so step == warmup_steps returns lr_max exactly
    return schedule.lr_max - (schedule.lr_max - lr_min) * (1.0 - math.cos(math.pi * progress)) / 2.0


def compute_schedule_period(param_count: int, tokens_per_step: int) -> int:
    """Compute-optimal number of sequential steps, ``ceil(20 |theta| / tokens_per_step)``."""
    if param_count < 1 or tokens_per_step < 1:
        raise ConfigError("param_count and tokens_per_step must both be >= 1")
    # integer ceil, exact for large counts
    return -(-TOKENS_PER_PARAM * int(param_count) // int(tokens_per_step))


@dataclass
class AdamWState:
    m: ParamVector
    v: ParamVector
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0

    @classmethod
    def fresh(cls, params: ParamVector, **hyper) -> AdamWState:
        return cls(m=params.zeros_like(), v=params.zeros_like(), **hyper)


def clip_by_global_norm(grads: ParamVector, max_norm: float | None) -> tuple[ParamVector, float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``; returns (grads, norm)."""
    norm = grads.norm()
    if max_norm is None or norm <= max_norm:
        return grads, norm
    return grads * (max_norm / norm), norm


def _check_finite(grads: ParamVector, context: dict) -> None:
    if not grads.is_finite():
        raise NumericError("non-finite gradient", **context)


def adamw_step(
    params: ParamVector,
    grads: ParamVector,
    state: AdamWState,
    lr: float,
    *,
    context: dict | None = None,
) -> ParamVector:
    """One AdamW update. Mutates ``state`` (moments, step count); returns new params.

    ``params - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * params)``
    after global-norm clipping of ``grads``.
    """
    params.check_compatible(grads)
    params.check_compatible(state.m)
    if lr < 0:
        raise ConfigError("learning rate must be >= 0")
    _check_finite(grads, context or {})
    grads, _ = clip_by_global_norm(grads, state.clip_norm)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    out = []
    for (name, p), g, m, v in zip(params, grads.arrays(), state.m.arrays(), state.v.arrays()):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        out.append((name, p - lr * update))
    return ParamVector(out)


def sgd_step(
    params: ParamVector, grads: ParamVector, lr: float, *, context: dict | None = None
) -> ParamVector:
    """Plain SGD: no momentum, no weight decay, no clipping."""
    params.check_compatible(grads)
    _check_finite(grads, context or {})
    return params - grads * lr


class ServerOptKind(str, Enum):
    FEDAVG = "fedavg"
    FEDMOMENTUM = "fedmomentum"


@dataclass
class ServerOptState:
    """Outer optimizer applied to the round pseudo-gradient.

    FedAvg is FedMomentum with ``lr=1`` and ``momentum=0``. The velocity buffer
    persists across rounds; it is created lazily on the first step.
    """

    kind: ServerOptKind = ServerOptKind.FEDAVG
    lr: float = 1.0
    momentum: float = 0.0
    nesterov: bool = False
    velocity: ParamVector | None = None

    def __post_init__(self):
        self.kind = ServerOptKind(self.kind)
        if self.kind is ServerOptKind.FEDAVG and (self.lr != 1.0 or self.momentum != 0.0):
            raise ConfigError("fedavg is fixed at lr=1, momentum=0; use fedmomentum instead")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("server lr must be >= 0 and momentum in [0, 1)")

    @property
    def is_plain_average(self) -> bool:
        return self.lr == 1.0 and self.momentum == 0.0


@dataclass(frozen=True)
class PseudoGradient:
    """Averaged client update ``delta = theta - mean_k theta_k`` for one round.

    ``client_mean`` is kept alongside so the plain-average policy can return the
    mean of client models directly instead of ``theta - delta``, which is only
    equal up to cancellation error.
    """

    delta: ParamVector
    client_mean: ParamVector | None = None
    anchor_bytes: bytes | None = field(default=None, repr=False)


def server_step(
    state: ServerOptState,
    theta: ParamVector,
    delta: ParamVector | PseudoGradient,
    round: int,
) -> ParamVector:
    """theta_{t+1} from theta_t and the averaged pseudo-gradient.

    FedMomentum: ``v <- mu v + delta``; step is ``v`` or ``mu v + delta`` (Nesterov);
    ``theta <- theta - lr * step``.
    """
    client_mean = None
    if isinstance(delta, PseudoGradient):
        if delta.anchor_bytes is not None and delta.anchor_bytes != theta.tobytes():
            raise ContractError(f"pseudo-gradient of round {round} was built against another theta")
        client_mean = delta.client_mean
        delta = delta.delta
    theta.check_compatible(delta)

    if state.velocity is None:
        state.velocity = delta.zeros_like()
    state.velocity.check_compatible(delta)

    mu = state.momentum
    if state.is_plain_average:
        # mu = 0: v = delta; theta - 1 * delta == client mean algebraically
        state.velocity = delta.copy()
        if client_mean is not None:
            theta.check_compatible(client_mean)
            return client_mean.copy()
        return theta - delta
    state.velocity = state.velocity * mu + delta
    direction = state.velocity * mu + delta if state.nesterov else state.velocity
    return theta - direction * state.lr
