"""Minimal reverse-mode autodiff over dense numpy tensors.

Forward ops build a graph of `Tensor` nodes; `backward` replays the nodes of
a `Tape` (reverse topological order, each node exactly once) and accumulates
gradients into `.grad`.  Everything is float32 by default; gradient checking
temporarily promotes parameters to float64 so the finite-difference oracle is
evaluated at high precision.

Also hosts the seeded RNG (xoshiro256**), Adam, dense-layer helpers and the
finite-difference gradient checker.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericOverflowError(ArithmeticError):
    """A forward op produced a non-finite value."""


def _finite_or_raise(data: np.ndarray, op: str):
    # cheap: a NaN/Inf anywhere poisons the sum; recheck precisely before raising
    if not math.isfinite(float(np.sum(data))):
        if not np.all(np.isfinite(data)):
            raise NumericOverflowError(f"non-finite value produced by {op}")


class Tensor:
    """A node in the autodiff graph: value, parents and a backward closure."""

    __slots__ = ("data", "grad", "parents", "bwd")

    def __init__(self, data, parents=(), bwd=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.parents = parents
        self.bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray):
    g = _unbroadcast(np.asarray(g), t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


class Tape:
    """Creation-ordered record of the graph below a root node."""

    def __init__(self, root: Tensor):
        nodes, visited, stack = [], set(), [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.nodes = nodes  # topological order, root last
        self.root = root

    def backward(self) -> "Tape":
        """Populate `.grad` on every node, visiting each exactly once."""
        for t in self.nodes:
            t.grad = None
        self.root.grad = np.ones_like(self.root.data)
        for t in reversed(self.nodes):
            if t.grad is not None and t.bwd is not None:
                t.bwd(t.grad)
        return self


def backward(loss: Tensor) -> Tape:
    return Tape(loss).backward()


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _finite_or_raise(out, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return Tensor(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _finite_or_raise(out, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _finite_or_raise(out, "mul")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    _finite_or_raise(out, "matmul")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(out, (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = a.data.T

    def bwd(g):
        _accum(a, g.T)

    return Tensor(out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return Tensor(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return Tensor(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return Tensor(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _finite_or_raise(out, "softmax")

    def bwd(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, (a,), bwd)


_XLOGX_FLOOR = 1e-12


def xlogx(a) -> Tensor:
    """Elementwise x*log(x) with the convention 0*log(0) = 0 (needs x >= 0)."""
    a = as_tensor(a)
    logs = np.log(np.maximum(a.data, _XLOGX_FLOOR))
    live = a.data > _XLOGX_FLOOR
    out = np.where(live, a.data * logs, 0.0).astype(a.data.dtype)

    def bwd(g):
        _accum(a, g * np.where(live, logs + 1.0, 0.0))

    return Tensor(out, (a,), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return Tensor(out, (a,), bwd)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)
    _finite_or_raise(out, "sum")

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return Tensor(out, (a,), bwd)


def mean(a) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean()
    _finite_or_raise(out, "mean")
    inv = 1.0 / a.data.size

    def bwd(g):
        _accum(a, np.broadcast_to(g * inv, a.data.shape))

    return Tensor(out, (a,), bwd)


def outer(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError("outer expects 1-d operands")
    out = np.outer(u.data, v.data)

    def bwd(g):
        _accum(u, g @ v.data)
        _accum(v, g.T @ u.data)

    return Tensor(out, (u, v), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(out, (a,), bwd)


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return Tensor(out, (a,), bwd)


def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def dense_forward(w, b, x) -> Tensor:
    """y = x @ w + b with w of shape (n_in, n_out)."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# seeded RNG: xoshiro256**, state expanded from a 64-bit seed via splitmix64

_M64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _M64


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31), state


class Rng:
    """Deterministic xoshiro256** stream; identical on every platform."""

    def __init__(self, seed: int):
        s = int(seed) & _M64
        words = []
        for _ in range(4):
            w, s = _splitmix64(s)
            words.append(w)
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _M64, 7) * 9) & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def _unit(self, n: int) -> np.ndarray:
        # doubles in [0, 1) with 53 random bits
        vals = [(self.next_u64() >> 11) * (1.0 / (1 << 53)) for _ in range(n)]
        return np.array(vals, dtype=np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = low + (high - low) * self._unit(n)
        return u.astype(np.float32).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._unit(pairs)  # in (0, 1]
        u2 = self._unit(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return z.astype(np.float32).reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        bound = (_M64 + 1) - ((_M64 + 1) % n)
        while True:
            r = self.next_u64()
            if r < bound:
                return r % n

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), via partial Fisher-Yates."""
        pool = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


# ---------------------------------------------------------------------------
# layers and optimizer


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "linear": lambda t: t,
}

_ACTIVATIONS_NP = {
    "relu": lambda d: np.maximum(d, 0),
    "tanh": np.tanh,
    "sigmoid": lambda d: np.where(
        d >= 0,
        1.0 / (1.0 + np.exp(-np.abs(d))),
        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))),
    ).astype(d.dtype),
    "linear": lambda d: d,
}


class Mlp:
    """Dense stack; weights init uniform(-a, a), a = sqrt(6 / (fan_in + fan_out))."""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng: Rng):
        if len(activations) != len(sizes) - 1:
            raise ShapeError("need one activation per layer")
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            a = math.sqrt(6.0 / (n_in + n_out))
            self.weights.append(Tensor(rng.uniform((n_in, n_out), -a, a)))
            self.biases.append(Tensor(np.zeros(n_out, dtype=np.float32)))

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = _ACTIVATIONS[act](dense_forward(w, b, x))
        return x

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without recording, same arithmetic as __call__."""
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = _ACTIVATIONS_NP[act](x @ w.data + b.data)
        return x

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


class AdamState:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0


def adam_step(state: AdamState, lr: float | None = None):
    """One update over the state's parameters, reading `.grad` (None = zero)."""
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad if p.grad is not None else 0.0
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= lr / c1
        p.data -= denom


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
               tolerance: float = 1e-4, h: float = 1e-5) -> dict:
    """Compare analytic gradients against float64 central differences.

    `loss_fn` must be deterministic (freeze any noise before calling).  The
    analytic pass runs at the params' native precision; for the numeric
    oracle, parameter data is temporarily promoted to float64.  Relative
    error uses denominator max(|a|, |n|, 1e-3).
    """
    params = list(params)
    backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        per_param = []
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = float(loss_fn().data)
                flat[i] = keep - h
                dn = float(loss_fn().data)
                flat[i] = keep
                num = (up - dn) / (2 * h)
                an = float(a.reshape(-1)[i])
                err = abs(an - num) / max(abs(an), abs(num), 1e-3)
                worst = max(worst, err)
            per_param.append(worst)
    finally:
        for p, d in zip(params, originals):
            p.data = d

    worst = max(per_param) if per_param else 0.0
    return {"per_param": per_param, "max_rel_err": worst, "ok": worst < tolerance}
