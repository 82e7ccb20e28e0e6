"""Miniature pre-norm decoder-only transformer over a character vocabulary."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple

import numpy as np

from fedlm import tensor as T
from fedlm.errors import ConfigError, TokenIndexError, UsageError
from fedlm.tensor import ParamVector, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 2
    expansion_ratio: int = 4
    vocab_size: int = 64
    seq_len: int = 32

    def __post_init__(self):
        for field, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"model.{field} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.expansion_ratio * self.d_model


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.targets.size)

    @classmethod
    def from_windows(cls, windows: np.ndarray) -> Batch:
        """Split ``[batch, seq + 1]`` token windows into shifted inputs/targets."""
        windows = np.asarray(windows, dtype=np.int64)
        return cls(np.ascontiguousarray(windows[:, :-1]), np.ascontiguousarray(windows[:, 1:]))


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order and shapes."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = [("tok_emb", (v, d)), ("pos_emb", (cfg.seq_len, d))]
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1.gamma", (d,)),
            (p + "ln1.beta", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.gamma", (d,)),
            (p + "ln2.beta", (d,)),
            (p + "mlp.w1", (d, f)),
            (p + "mlp.b1", (f,)),
            (p + "mlp.w2", (f, d)),
            (p + "mlp.b2", (d,)),
        ]
    shapes += [("ln_f.gamma", (d,)), ("ln_f.beta", (d,)), ("head.w", (d, v)), ("head.b", (v,))]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    d, f, v, l = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.seq_len
    per_block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    return v * d + l * d + cfg.n_blocks * per_block + 2 * d + d * v + v


def init_model(cfg: ModelConfig, seed: int) -> ParamVector:
    """Deterministic initialization.

    Weights ~ N(0, 0.02^2); residual output projections (``attn.wo``, ``mlp.w2``)
    use std 0.02 / sqrt(2 * n_blocks). Biases and LayerNorm shifts are zero,
    LayerNorm gains one.
    """
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("init_model needs a ModelConfig")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x1D17]))
    resid_std = INIT_STD / math.sqrt(2 * cfg.n_blocks)
    entries = []
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf == "beta" or (leaf.startswith("b") and len(shape) == 1):
            arr = np.zeros(shape)
        else:
            std = resid_std if name.endswith(("attn.wo", "mlp.w2")) else INIT_STD
            arr = rng.normal(0.0, std, size=shape)
        entries.append((name, arr))
    return ParamVector(entries)


def _check_params(params: ParamVector, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if list(params.names) != [n for n, _ in expected] or params.shapes != [s for _, s in expected]:
        raise ConfigError("parameter vector does not match the model config")


def _forward(p: dict[str, Tensor], inputs: np.ndarray, cfg: ModelConfig) -> Tensor:
    b, t = inputs.shape
    h, hd = cfg.n_heads, cfg.head_dim
    x = T.embed(p["tok_emb"], p["pos_emb"], inputs)
    for i in range(cfg.n_blocks):
        q_ = f"blocks.{i}."
        a = T.layer_norm(x, p[q_ + "ln1.gamma"], p[q_ + "ln1.beta"])

        def heads(w: str, bias: str) -> Tensor:
            y = T.add(T.matmul(a, p[q_ + w]), p[q_ + bias])
            return T.transpose(T.reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

        q = heads("attn.wq", "attn.bq")
        k = heads("attn.wk", "attn.bk")
        v = heads("attn.wv", "attn.bv")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        ctx = T.matmul(T.causal_softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = x + T.add(T.matmul(ctx, p[q_ + "attn.wo"]), p[q_ + "attn.bo"])

        m = T.layer_norm(x, p[q_ + "ln2.gamma"], p[q_ + "ln2.beta"])
        m = T.gelu(T.add(T.matmul(m, p[q_ + "mlp.w1"]), p[q_ + "mlp.b1"]))
        x = x + T.add(T.matmul(m, p[q_ + "mlp.w2"]), p[q_ + "mlp.b2"])
    x = T.layer_norm(x, p["ln_f.gamma"], p["ln_f.beta"])
    return T.add(T.matmul(x, p["head.w"]), p["head.b"])


class ForwardResult(NamedTuple):
    loss: Tensor
    logits: Tensor
    leaves: dict[str, Tensor]


def _check_tokens(batch: Batch, cfg: ModelConfig) -> None:
    for arr in (batch.inputs, batch.targets):
        if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
            raise TokenIndexError(f"token ids must lie in [0, {cfg.vocab_size})")


def forward_loss(params: ParamVector, batch: Batch, cfg: ModelConfig) -> ForwardResult:
    """Build the graph for one batch; call ``result.loss.backward()`` for gradients."""
    _check_params(params, cfg)
    _check_tokens(batch, cfg)
    leaves = params.leaves()
    logits = _forward(leaves, batch.inputs, cfg)
    loss = T.softmax_cross_entropy(logits, batch.targets)
    return ForwardResult(loss, logits, leaves)


def loss_and_grad(params: ParamVector, batch: Batch, cfg: ModelConfig) -> tuple[float, ParamVector]:
    res = forward_loss(params, batch, cfg)
    res.loss.backward()
    grads = ParamVector(
        (name, leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in res.leaves.items()
    )
    return res.loss.item(), grads


def logits_of(params: ParamVector, inputs: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Forward pass without gradient bookkeeping."""
    _check_params(params, cfg)
    frozen = {n: Tensor(a) for n, a in params}
    return _forward(frozen, np.asarray(inputs), cfg).data


def eval_perplexity(params: ParamVector, batches: Iterable[Batch], cfg: ModelConfig) -> float:
    """exp of the token-weighted mean NLL over the whole stream."""
    total_nll = 0.0
    total_tokens = 0
    for batch in batches:
        _check_tokens(batch, cfg)
        nll = T.token_nll(logits_of(params, batch.inputs, cfg), batch.targets)
        total_nll += float(nll.sum())
        total_tokens += nll.size
    if total_tokens == 0:
        raise UsageError("eval_perplexity needs a non-empty evaluation stream")
    mean_nll = total_nll / total_tokens
    # a diverged model can exceed the float range; report it rather than crash
    return math.exp(mean_nll) if mean_nll < 709.0 else math.inf
