"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the tiny decoder-only transformer are provided.
Each op records a closure that maps the output gradient to parent gradients;
``Tensor.backward`` walks the graph once in reverse topological order and then
releases it, so a second backward over the same graph is an error.

Broadcasting is limited to adding a 1-D bias over the trailing dimension.
A graph must stay on one thread; distinct graphs may run concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from fedlm.errors import (
    ContractError,
    DimensionError,
    NumericError,
    TokenIndexError,
    UsageError,
)

DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self._consumed:
            raise UsageError("backward() already ran on this graph; run a new forward pass")
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._parents:
                if node.grad is not None and node._backward is not None:
                    node._backward(node.grad)
                # interior nodes: free the graph as we go
                node.grad = None
                node._backward = None
                node._parents = ()
                node._consumed = True
            elif node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise NumericError("non-finite gradient reached a leaf tensor")
        self._consumed = True

    # operator sugar
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, neg(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _node(data: np.ndarray, parents: tuple, backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, _parents=parents)
    if out.requires_grad:
        out._backward = backward
    else:
        out._parents = ()
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias over the last axis of ``a``."""
    if a.shape == b.shape:
        def backward(g):
            a._accumulate(g)
            b._accumulate(g)
        return _node(a.data + b.data, (a, b), backward)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward(g):
            a._accumulate(g)
            b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))
        return _node(a.data + b.data, (a, b), backward)
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: a._accumulate(-g))


def scale(a: Tensor, alpha: float) -> Tensor:
    return _node(a.data * alpha, (a,), lambda g: a._accumulate(g * alpha))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    return _node(np.array(a.data.sum()), (a,), lambda g: a._accumulate(np.full(a.shape, g)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.data.ndim == 2:
        k, n = b.shape

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))

        return _node(a.data @ b.data, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(old)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: a._accumulate(g.transpose(inverse)),
    )


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accumulate(g * d)

    return _node(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(
                rstd
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return _node(out, (x, gamma, beta), backward)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with positions j > i masked out."""
    t = scores.shape[-1]
    if scores.data.ndim < 2 or scores.shape[-2] != t:
        raise DimensionError(f"causal_softmax needs square trailing dims, got {scores.shape}")
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    s = np.where(future, -np.inf, scores.data)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        scores._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (scores,), backward)


def embed(token_table: Tensor, pos_table: Tensor, ids: np.ndarray) -> Tensor:
    """Token embedding lookup plus learned positional embedding: ``[B, T] -> [B, T, d]``."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be [batch, seq], got shape {ids.shape}")
    vocab, d = token_table.shape
    b, t = ids.shape
    if t > pos_table.shape[0]:
        raise DimensionError(f"sequence length {t} exceeds positional table {pos_table.shape[0]}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenIndexError(f"token ids must lie in [0, {vocab})")
    out = token_table.data[ids] + pos_table.data[:t]

    def backward(g):
        if token_table.requires_grad:
            gt = np.zeros_like(token_table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
            token_table._accumulate(gt)
        if pos_table.requires_grad:
            gp = np.zeros_like(pos_table.data)
            gp[:t] = g.sum(axis=0)
            pos_table._accumulate(gp)

    return _node(out, (token_table, pos_table), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all positions of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise TokenIndexError(f"targets must lie in [0, {v})")
    flat = logits.data.reshape(-1, v)
    tgt = targets.reshape(-1)
    n = flat.shape[0]
    z = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1)
    nll = np.log(se) - z[np.arange(n), tgt]
    loss = nll.sum() / n
    if not math.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")

    def backward(g):
        p = e / se[:, None]
        p[np.arange(n), tgt] -= 1.0
        logits._accumulate((p * (float(g.reshape(-1)[0]) / n)).reshape(logits.shape))

    return _node(np.array(loss), (logits,), backward)


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood, no graph."""
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    tgt = np.asarray(targets).reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    nll = np.log(np.exp(z).sum(axis=1)) - z[np.arange(flat.shape[0]), tgt]
    return nll.reshape(np.asarray(targets).shape)


class ParamVector:
    """Ordered, named collection of float64 arrays.

    The order is fixed at construction and is the canonical order for every
    reduction and for serialization. Arithmetic between two vectors requires
    identical names, order and shapes.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]]):
        names: list[str] = []
        arrays: list[np.ndarray] = []
        for name, arr in entries:
            if name in names:
                raise ContractError(f"duplicate parameter name {name!r}")
            names.append(name)
            arrays.append(np.ascontiguousarray(arr, dtype=DTYPE))
        self._names = tuple(names)
        self._arrays = arrays

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self._arrays]

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self._arrays)

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def arrays(self) -> list[np.ndarray]:
        return list(self._arrays)

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} entries, {self.total_len} scalars)"

    def check_compatible(self, other: ParamVector) -> None:
        if self._names != other._names:
            raise ContractError("parameter names or order differ")
        for name, a, b in zip(self._names, self._arrays, other._arrays):
            if a.shape != b.shape:
                raise ContractError(f"shape mismatch for {name!r}: {a.shape} vs {b.shape}")

    def _map(self, fn) -> ParamVector:
        return ParamVector((n, fn(a)) for n, a in zip(self._names, self._arrays))

    def _zip(self, other: ParamVector, fn) -> ParamVector:
        self.check_compatible(other)
        return ParamVector(
            (n, fn(a, b)) for n, a, b in zip(self._names, self._arrays, other._arrays)
        )

    def copy(self) -> ParamVector:
        return self._map(np.copy)

    def zeros_like(self) -> ParamVector:
        return self._map(np.zeros_like)

    def __add__(self, other: ParamVector) -> ParamVector:
        return self._zip(other, np.add)

    def __sub__(self, other: ParamVector) -> ParamVector:
        return self._zip(other, np.subtract)

    def __neg__(self) -> ParamVector:
        return self._map(np.negative)

    def __mul__(self, alpha: float) -> ParamVector:
        alpha = float(alpha)
        return self._map(lambda a: a * alpha)

    __rmul__ = __mul__

    def leaves(self) -> dict[str, Tensor]:
        """Fresh leaf tensors (copies) ready for a forward pass."""
        return {n: Tensor(a.copy(), requires_grad=True) for n, a in self}

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([a.reshape(-1) for a in self._arrays])

    @classmethod
    def from_flat(cls, like: ParamVector, flat: np.ndarray) -> ParamVector:
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != like.total_len:
            raise ContractError(f"flat length {flat.size} != {like.total_len}")
        out, offset = [], 0
        for name, a in like:
            out.append((name, flat[offset : offset + a.size].reshape(a.shape).copy()))
            offset += a.size
        return cls(out)

    def dot(self, other: ParamVector) -> float:
        self.check_compatible(other)
        total = 0.0
        for a, b in zip(self._arrays, other._arrays):
            total += float(np.dot(a.reshape(-1), b.reshape(-1)))
        return total

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self._arrays)

    def tobytes(self) -> bytes:
        return b"".join(a.astype("<f8", copy=False).tobytes() for a in self._arrays)

    def equal_bytes(self, other: ParamVector) -> bool:
        return (
            self._names == other._names
            and self.shapes == other.shapes
            and self.tobytes() == other.tobytes()
        )

    @classmethod
    def mean(cls, vectors: Sequence[ParamVector]) -> ParamVector:
        """Uniform mean anchored at the first vector: ``v0 + sum_k (v_k - v0) / n``.

        Differences are accumulated strictly in the given order. The anchoring makes
        the mean of identical vectors (and of a single vector) bytewise equal to it.
        """
        if not vectors:
            raise ContractError("mean of zero parameter vectors")
        first = vectors[0]
        if len(vectors) == 1:
            return first.copy()
        acc = [np.zeros_like(a) for a in first._arrays]
        for v in vectors[1:]:
            first.check_compatible(v)
            for dst, src, base in zip(acc, v._arrays, first._arrays):
                dst += src - base
        n = float(len(vectors))
        # a zero correction keeps the anchor as is: -0.0 + 0.0 would flip its sign
        return cls(
            (name, np.where(dst == 0.0, base, base + dst / n))
            for name, base, dst in zip(first._names, first._arrays, acc)
        )
