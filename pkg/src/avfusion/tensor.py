"""Minimal reverse-mode autodiff engine over float64 numpy arrays.

Everything here is define-by-run: each op records a backward closure on the
output tensor and the graph is rebuilt from scratch every forward pass.
Non-finite values (NaN/Inf) are a hard error at every op boundary.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "AttentionParams",
    "AdamWState",
    "RngState",
    "derive_seed",
    "NumericsError",
    "ShapeError",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "tanh",
    "gelu",
    "softmax",
    "tensor_sum",
    "embedding",
    "linear",
    "layer_norm",
    "multi_head_attention",
    "softmax_cross_entropy",
    "backward",
    "adamw_step",
]


class NumericsError(ArithmeticError):
    """A non-finite value (NaN or Inf) appeared at an op boundary."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``requires_grad`` marks the tensor as a leaf to accumulate gradients
    into (or, for op outputs, as being on a differentiable path).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


class Parameter(Tensor):
    """Named model weight; ``trainable`` aliases ``requires_grad``.

    Frozen parameters (trainable=False) are invisible to backward and are
    skipped by the optimizer.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _assert_finite(data: np.ndarray) -> None:
    # NaN/Inf anywhere propagates into the sum; finite values cannot overflow
    # it at desk-scale magnitudes, so this is a single cheap reduction.
    if not math.isfinite(data.sum()):
        raise NumericsError(f"non-finite op result of shape {data.shape}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _assert_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim \
            or a.data.shape[-1] != b.data.shape[-2] \
            or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _result(data, (a, b), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    # structural: cannot create non-finite values, so skip the probe
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and a.requires_grad:
        out.requires_grad = True
        out._parents = (a,)
        out._backward = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    data = a.data.transpose(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _result(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - y * y))

    return _result(y, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-approximation GELU (keeps finite-difference checks clean)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 0.134145 * x2)
        _accum(a, g * d)

    return _result(y, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _result(y, (a,), bwd)


def tensor_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"token ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(f"token id out of range [0, {table.data.shape[0]})")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accum(table, gt)

    return _result(data, (table,), bwd)


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``y = x @ w + b`` broadcast over leading axes of ``x`` (fused node)."""
    if w.data.ndim != 2 or x.data.ndim < 1 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes incompatible: x {x.data.shape} vs w {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear bias shape {b.data.shape} != ({w.data.shape[1]},)")
    d_in, d_out = w.data.shape
    data = x.data @ w.data + b.data

    def bwd(g):
        g2 = g.reshape(-1, d_out)
        if w.requires_grad:
            _accum(w, x.data.reshape(-1, d_in).T @ g2)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))

    return _result(data, (x, w, b), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * term)

    return _result(data, (x, gamma, beta), bwd)


@dataclass
class AttentionParams:
    """Projection weights and biases for one attention sublayer."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor

    def all(self) -> tuple[Tensor, ...]:
        return (self.w_q, self.b_q, self.w_k, self.b_k,
                self.w_v, self.b_v, self.w_o, self.b_o)


_NEG_LARGE = -1e30
_causal_mask_cache: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    m = _causal_mask_cache.get(t)
    if m is None:
        m = np.triu(np.full((t, t), _NEG_LARGE), k=1)
        _causal_mask_cache[t] = m
    return m


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: AttentionParams,
                         n_heads: int, causal_mask: bool = False) -> Tensor:
    """Scaled dot-product attention; self-attention when ``q_in is kv_in``.

    Fused into a single graph node: the backward closure replays the chain
    (output proj <- head merge <- ctx <- softmax <- scaled scores <- q/k/v
    projections) by hand. Verified against finite differences in the tests.
    """
    p = params
    d = q_in.data.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    t_q, t_kv = q_in.data.shape[0], kv_in.data.shape[0]
    if t_q < 1 or t_kv < 1:
        raise ShapeError("attention requires at least one query and one key position")
    if causal_mask and t_q != t_kv:
        raise ShapeError(f"causal attention needs square scores, got {t_q} x {t_kv}")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    q = q_in.data @ p.w_q.data + p.b_q.data
    k = kv_in.data @ p.w_k.data + p.b_k.data
    v = kv_in.data @ p.w_v.data + p.b_v.data
    qh = q.reshape(t_q, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(t_kv, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(t_kv, n_heads, dh).transpose(1, 0, 2)

    scores = qh @ kh.transpose(0, 2, 1) * scale
    if causal_mask:
        scores = scores + _causal_mask(t_q)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = attn @ vh
    heads = ctx.transpose(1, 0, 2).reshape(t_q, d)
    data = heads @ p.w_o.data + p.b_o.data

    def bwd(g):
        if p.w_o.requires_grad:
            _accum(p.w_o, heads.T @ g)
        if p.b_o.requires_grad:
            _accum(p.b_o, g.sum(axis=0))
        dctx = (g @ p.w_o.data.T).reshape(t_q, n_heads, dh).transpose(1, 0, 2)
        dattn = dctx @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= scale
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 2, 1) @ qh
        dq = dqh.transpose(1, 0, 2).reshape(t_q, d)
        dk = dkh.transpose(1, 0, 2).reshape(t_kv, d)
        dv = dvh.transpose(1, 0, 2).reshape(t_kv, d)
        if p.w_q.requires_grad:
            _accum(p.w_q, q_in.data.T @ dq)
        if p.b_q.requires_grad:
            _accum(p.b_q, dq.sum(axis=0))
        if p.w_k.requires_grad:
            _accum(p.w_k, kv_in.data.T @ dk)
        if p.b_k.requires_grad:
            _accum(p.b_k, dk.sum(axis=0))
        if p.w_v.requires_grad:
            _accum(p.w_v, kv_in.data.T @ dv)
        if p.b_v.requires_grad:
            _accum(p.b_v, dv.sum(axis=0))
        if q_in.requires_grad:
            _accum(q_in, dq @ p.w_q.data.T)
        if kv_in.requires_grad:
            _accum(kv_in, dk @ p.w_k.data.T + dv @ p.w_v.data.T)

    return _result(data, (q_in, kv_in) + p.all(), bwd)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray,
                          ignore_id: int) -> tuple[Tensor, int]:
    """Mean NLL over non-ignored positions plus the argmax-match count."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [T, V], got {logits.data.shape}")
    t, vocab = logits.data.shape
    if targets.shape != (t,):
        raise ShapeError(f"targets length {targets.shape} != logit rows {t}")
    kept = targets != ignore_id
    n = int(kept.sum())
    if n == 0:
        raise ValueError("all target positions ignored; mean loss undefined")
    tk = targets[kept]
    if tk.min() < 0 or tk.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")

    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(kept)[0]
    loss = np.asarray(-logp[rows, tk].sum() / n)
    correct = int((z[rows].argmax(axis=-1) == tk).sum())

    def bwd(g):
        d = np.zeros_like(z)
        d[rows] = np.exp(logp[rows])
        d[rows, tk] -= 1.0
        _accum(logits, d * (float(g) / n))

    return _result(loss, (logits,), bwd), correct


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable tensor with requires_grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam moments, keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Iterable[Parameter], state: AdamWState) -> None:
    """One AdamW update over the trainable parameters.

    Weight decay is decoupled (applied to the weights, never folded into
    the gradient). Frozen parameters are skipped entirely.
    """
    active = [p for p in params if p.trainable]
    for p in active:
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {p.name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in active:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - state.lr * (update + state.weight_decay * p.data)


# ---------------------------------------------------------------------------
# deterministic randomness
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit seed for a named substream of ``seed``."""
    h = hashlib.sha256(str(seed).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class RngState:
    """Counter-based random stream: (seed, counter) fully determine draws.

    Every public draw advances ``counter`` by exactly one, so call sites
    stay reproducible regardless of how many values each call returns.
    """

    seed: int
    counter: int = 0

    def derive(self, *labels) -> "RngState":
        """Independent named substream; does not consume a draw."""
        return RngState(derive_seed(self.seed, *labels))

    def _next(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.counter & _MASK64], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape=None) -> np.ndarray:
        return self._next().normal(size=shape)

    def uniform(self, size=None):
        return self._next().uniform(size=size)

    def integers(self, low: int, high: int, size=None):
        return self._next().integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True,
               p: np.ndarray | None = None) -> np.ndarray:
        return self._next().choice(n, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)
