"""Minimal dense-tensor substrate with reverse-mode differentiation.

Every op builds a node holding its value and a closure that maps the
output gradient to parent gradients. ``backward`` walks the recorded graph
in reverse topological order and deposits leaf gradients into a
:class:`ParamStore`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5

_recording = True


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    """A dense array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "parents", "grad_fn", "name", "requires_grad")

    def __init__(self, data, parents=(), grad_fn=None, name=None, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.name = name
        if _recording and grad_fn is not None and any(p.requires_grad for p in parents):
            self.parents = tuple(parents)
            self.grad_fn = grad_fn
            self.requires_grad = True
        else:
            self.parents = ()
            self.grad_fn = None
            self.requires_grad = requires_grad and _recording

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return Tensor(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return Tensor(out, (a,), grad_fn)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    s = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(s),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in ts], axis=axis), ts,
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    s = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather along axis 0; negative indices yield zero rows.

    Output shape is ``idx.shape + a.shape[1:]``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    safe = np.where(idx < 0, n, idx)
    padded = np.concatenate([a.data, np.zeros((1,) + a.shape[1:], dtype=DTYPE)], axis=0)
    out = padded[safe]

    def grad_fn(g):
        flat = safe.ravel()
        g2 = g.reshape((flat.size, -1))
        keep = flat < n
        gx = np.zeros((n, g2.shape[1]), dtype=DTYPE)
        if keep.any():
            np.add.at(gx, flat[keep], g2[keep])
        return (gx.reshape(a.shape),)

    return Tensor(out, (a,), grad_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` semantics for ``a[..., n, k] @ b[..., k, m]``; b may be 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    # strided operands push numpy's batched matmul off the BLAS path
    av, bv = np.ascontiguousarray(a.data), np.ascontiguousarray(b.data)
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return Tensor(av @ bv, (a, b), grad_fn)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ W + b``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and as_tensor(b).shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {as_tensor(b).shape} incompatible with weight {W.shape}")
    y = matmul(x, W)
    return y if b is None else add(y, b)


linear_forward = linear


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis (biased variance), then scale and shift."""
    x = as_tensor(x)
    gain, bias = as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty feature dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.data

    def grad_fn(g):
        gg = _unbroadcast(g * xhat, gv.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor(xhat * gv + bias.data, (x, gain, bias), grad_fn)


def softmax_np(e: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.asarray(e, dtype=DTYPE)
    if e.shape[axis] == 0:
        raise ShapeError("softmax over zero elements")
    z = np.exp(e - e.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(e) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    e = as_tensor(e)
    p = softmax_np(e.data, axis=-1)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor(p, (e,), grad_fn)


def masked_softmax(e: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0.

    Rows with no valid entry come out all-zero.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), e.shape)
    x = np.where(mask, e.data, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = np.where(mask, np.exp(x - m), 0.0)
    s = z.sum(axis=-1, keepdims=True)
    p = z / np.where(s > 0, s, 1.0)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor(p, (e,), grad_fn)


def masked_cross_entropy(logits: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over rows with ``valid`` set."""
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("masked_cross_entropy: every voxel is masked, mean undefined")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(z.shape[0])
    nll = lse - z[rows, target]
    loss = (nll * valid).sum() / count

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, target] -= 1.0
        return (p * (valid[:, None] * (g / count)),)

    return Tensor(loss, (logits,), grad_fn)


# ---------------------------------------------------------------- backward

def backward(out: Tensor, seed=None, store: "ParamStore | None" = None) -> dict:
    """Propagate ``seed`` (default ones) from ``out`` to every leaf.

    Leaf gradients are accumulated into ``store`` for trainable entries and
    also returned keyed by leaf name.
    """
    if not out.requires_grad:
        raise StateError("backward called on a tensor with no recorded forward computation")
    seed = np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=DTYPE)
    if seed.shape != out.shape:
        raise ShapeError(f"seed gradient shape {seed.shape} != output shape {out.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(out): seed}
    leaves: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            if node.name is not None:
                leaves[node.name] = leaves[node.name] + g if node.name in leaves else g
            continue
        for p, gp in zip(node.parents, node.grad_fn(g)):
            if not p.requires_grad or gp is None:
                continue
            k = id(p)
            grads[k] = grads[k] + gp if k in grads else gp
    if store is not None:
        for name, g in leaves.items():
            store.accumulate(name, g)
        store.grads_ready = True
    return leaves


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameter registry with gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self.grads_ready = False     # set by backward(), cleared by zero_grad()

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = np.array(value, dtype=DTYPE)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)
        self._trainable[name] = trainable
        return v

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def set_value(self, name: str, value) -> None:
        cur = self.value(name)
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != cur.shape:
            raise ShapeError(f"{name}: shape {value.shape} != stored {cur.shape}")
        cur[...] = value

    def grad(self, name: str) -> np.ndarray:
        self.value(name)
        return self._grads[name]

    def trainable(self, name: str) -> bool:
        self.value(name)
        return self._trainable[name]

    def tensor(self, name: str) -> Tensor:
        """Leaf node wrapping the stored array (no copy)."""
        return Tensor(self.value(name), name=name, requires_grad=self._trainable[name])

    def accumulate(self, name: str, g: np.ndarray) -> None:
        if name not in self._values or not self._trainable[name]:
            return
        self._grads[name] += g
        self.grads_ready = True

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)
        self.grads_ready = False

    def num_values(self, trainable_only: bool = True) -> int:
        return sum(v.size for k, v in self._values.items()
                   if self._trainable[k] or not trainable_only)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._values.items()}

    def items(self):
        return self._values.items()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(store: ParamStore, rng, name: str, fan_in: int, fan_out: int) -> None:
    store.add(f"{name}.W", uniform_init(rng, (fan_in, fan_out), fan_in))
    store.add(f"{name}.b", uniform_init(rng, (fan_out,), fan_in))


def add_layer_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def apply_linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(x, store.tensor(f"{name}.W"), store.tensor(f"{name}.b"))


def apply_layer_norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, store.tensor(f"{name}.g"), store.tensor(f"{name}.b"))


# ---------------------------------------------------------------- gradient oracle

def finite_diff_check(fn: Callable[[ParamStore], Tensor], store: ParamStore,
                      eps: float = 1e-5, names: Iterable[str] | None = None,
                      return_details: bool = False):
    """Compare analytic gradients against central differences.

    ``fn`` maps the store to a scalar Tensor and must be deterministic.
    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over every
    element of every trainable parameter (or of ``names``).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"finite difference step {eps} outside [1e-7, 1e-3]")
    store.zero_grad()
    loss = fn(store)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss at the unperturbed point")
    backward(loss, store=store)
    names = [n for n in (names or store.names()) if store.trainable(n)]
    analytic = {n: store.grad(n).copy() for n in names}

    errors: dict[str, float] = {}
    with no_grad():
        for n in names:
            v = store.value(n)
            flat = v.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn(store).data)
                flat[i] = orig - eps
                fm = float(fn(store).data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError(f"non-finite loss while perturbing {n}[{i}]")
                num[i] = (fp - fm) / (2 * eps)
            a = analytic[n].reshape(-1)
            rel = np.abs(a - num) / np.maximum(1.0, np.abs(num))
            errors[n] = float(rel.max()) if rel.size else 0.0
    store.zero_grad()
    worst = max(errors.values(), default=0.0)
    return (worst, errors) if return_details else worst
