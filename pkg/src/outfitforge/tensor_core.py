"""Minimal deterministic reverse-mode differentiation over float64 numpy arrays.

Operations only record onto a :class:`Tape` when one is active and at least
one input requires a gradient, so the same forward code serves training and
inference.  Arrays may carry any number of leading batch axes; the last two
axes are treated as (rows, cols).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class Tape:
    """Linear record of differentiable operations, replayed in reverse."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable) -> None:
        self.nodes.append((out, parents, backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            for p, g in zip(parents, fn(out.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self) -> None:
        if not _TAPES:
            raise RuntimeError("no active tape to differentiate through")
        _TAPES[-1].backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad and _TAPES:
        _TAPES[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / y, 0.0)
        return (g * d,)

    return _make(y, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(y, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=()) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# normalisation and attention kernels
# ---------------------------------------------------------------------------

def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains NaN or Inf")


def softmax(x, axis: int = -1, mask: np.ndarray | None = None):
    """Max-shifted softmax.  ``mask`` (broadcastable, True = keep) gives exact zeros.

    Plain arrays in, plain arrays out; tensors in, tensors out.
    """
    plain = not isinstance(x, Tensor)
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    _check_finite(x.data, "softmax input")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    if plain:
        return y

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, epsilon: float = 1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    plain = not any(isinstance(t, Tensor) for t in (x, gain, bias))
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm length mismatch: x[..., {d}], gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + epsilon)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    if plain:
        return y

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y, (x, gain, bias), backward)


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int
    causal: bool = False

    def __post_init__(self) -> None:
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, t, d = x.shape
    x = reshape(x, (*lead, t, h, d // h))
    n = len(lead)
    return transpose(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(x, (*lead, t, h * dh))


def multi_head_attention(q, k, v, cfg: AttentionConfig, params: Mapping[str, Tensor],
                         key_mask: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product attention with ``num_heads`` heads.

    ``params`` holds the projections ``wq, wk, wv, wo`` (each d_m x d_m).
    ``key_mask`` is a boolean array of shape (..., K) marking valid key rows.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = cfg.model_dim
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ValueError(f"attention inputs must have {d} columns: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("key and value row counts differ")
    h = cfg.num_heads
    qh = _split_heads(q @ params["wq"], h)
    kh = _split_heads(k @ params["wk"], h)
    vh = _split_heads(v @ params["wv"], h)
    scores = mul(qh @ transpose(kh, (*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2)),
                 1.0 / math.sqrt(cfg.head_dim))
    tq, tk = q.shape[-2], k.shape[-2]
    mask = None
    if cfg.causal:
        mask = np.tril(np.ones((tq, tk), dtype=bool))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        mask = km if mask is None else (mask & km)
    weights = softmax(scores, axis=-1, mask=mask)
    out = _merge_heads(weights @ vh) @ params["wo"]
    if return_weights:
        return out, weights
    return out


def pffn(x, params: Mapping[str, Tensor]) -> Tensor:
    """Position-wise feed-forward network: ReLU(x W1 + b1) W2 + b2, row by row."""
    x = as_tensor(x)
    w1 = as_tensor(params["w1"])
    if x.shape[-1] != w1.shape[0]:
        raise ValueError(f"pffn input has {x.shape[-1]} columns, expected {w1.shape[0]}")
    return relu(x @ w1 + params["b1"]) @ params["w2"] + params["b2"]


def encoder_layer(x: Tensor, P: Mapping[str, Tensor], prefix: str, cfg: AttentionConfig,
                  key_mask: np.ndarray | None = None) -> Tensor:
    """Self-attention and PFFN sub-layers, each wrapped in residual + layer norm."""
    mh = {w: P[f"{prefix}.mh.{w}"] for w in ("wq", "wk", "wv", "wo")}
    h1 = layer_norm(x + multi_head_attention(x, x, x, cfg, mh, key_mask=key_mask),
                    P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    ff = {w: P[f"{prefix}.ffn.{w}"] for w in ("w1", "b1", "w2", "b2")}
    return layer_norm(h1 + pffn(h1, ff), P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])


def transition_layer(x: Tensor, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Two fully connected layers with a ReLU between them."""
    return relu(x @ P[f"{prefix}.w0"] + P[f"{prefix}.b0"]) @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_transition(rng, prefix: str, d_in: int, d_m: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w0": uniform_init(rng, d_in, (d_in, d_m)),
        f"{prefix}.b0": uniform_init(rng, d_in, (d_m,)),
        f"{prefix}.w1": uniform_init(rng, d_m, (d_m, d_m)),
        f"{prefix}.b1": uniform_init(rng, d_m, (d_m,)),
    }


def init_attention(rng, prefix: str, d_m: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.{w}": uniform_init(rng, d_m, (d_m, d_m)) for w in ("wq", "wk", "wv", "wo")}


def init_layer_norm(prefix: str, d_m: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.g": np.ones(d_m), f"{prefix}.b": np.zeros(d_m)}


def init_pffn(rng, prefix: str, d_m: int, inner: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": uniform_init(rng, d_m, (d_m, inner)),
        f"{prefix}.b1": uniform_init(rng, d_m, (inner,)),
        f"{prefix}.w2": uniform_init(rng, inner, (inner, d_m)),
        f"{prefix}.b2": uniform_init(rng, inner, (d_m,)),
    }


def init_encoder_layer(rng, prefix: str, d_m: int, inner: int) -> dict[str, np.ndarray]:
    p = init_attention(rng, f"{prefix}.mh", d_m)
    p.update(init_layer_norm(f"{prefix}.ln1", d_m))
    p.update(init_pffn(rng, f"{prefix}.ffn", d_m, inner))
    p.update(init_layer_norm(f"{prefix}.ln2", d_m))
    return p


def leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


class Adam:
    """Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray | None]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate scalar ``fn`` on leaf tensors built from ``params``; return value and gradients."""
    P = leaves(params)
    with Tape() as tape:
        out = fn(P)
        if out.data.size != 1:
            raise ValueError(f"expected a scalar output, got shape {out.shape}")
        tape.backward(out)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return float(out.data), grads


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               step: float = 1e-5, coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``coords`` set, a random subset of that many coordinates per parameter is
    probed instead of every one.
    """
    if not 1e-5 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-5, 1e-3]")
    _, grads = value_and_grad(fn, params)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    rng = rng or np.random.default_rng(0)

    def f() -> float:
        out = fn({k: Tensor(v) for k, v in work.items()})
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued computation")
        return float(out.data)

    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, size=coords, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, abs(g[i] - num) / max(1.0, abs(num)))
    return worst
