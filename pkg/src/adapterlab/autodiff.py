"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` records its parents and a backward closure when any input
requires a gradient. :func:`backward` walks the recorded graph in reverse
topological order. Intermediate gradients live only for the duration of one
backward call, so calling backward twice on the same graph accumulates
exactly twice the leaf gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_FINITE = True

_grad_enabled = True
_relu_trace: list | None = None


class DimensionError(ValueError):
    pass


class VocabError(IndexError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class UndefinedMeanError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad: np.ndarray | None = None) -> list["Tensor"]:
        return backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through grad-requiring edges, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents or ():
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> list[Tensor]:
    """Accumulate d(root)/d(leaf) into every grad-requiring leaf.

    Returns the visited nodes in the order they were processed (reverse
    topological order).
    """
    if not root.requires_grad:
        raise RuntimeError("backward called on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise DimensionError("backward without an explicit grad needs a scalar root")
        grad = np.ones_like(root.data)
    order = topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    visited = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        visited.append(node)
        if node._parents is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return visited


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), fn, "mul")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)

    def fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), fn, "relu")


# ------------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape

    def fn(g):
        return (g.reshape(src),)

    return _result(x.data.reshape(shape), (x,), fn, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (g.transpose(inv),)

    return _result(x.data.transpose(axes), (x,), fn, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    def fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)

    return _result(np.array(x.data[key]), (x,), fn, "getitem")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# --------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules; gradients are g·bᵀ and aᵀ·g."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), fn, "matmul")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise VocabError(f"token id out of range [0, {weight.shape[0]})")

    def fn(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.ravel(), g.reshape(-1, weight.shape[1]))
        return (out,)

    return _result(weight.data[ids], (weight,), fn, "embedding")


# ---------------------------------------------------------------- normalizers

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = ggain = gbias = None
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), fn, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), fn, "softmax")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose label != ignore_index."""
    labels = np.asarray(labels).reshape(-1)
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    if flat.shape[0] != labels.shape[0]:
        raise DimensionError(f"{flat.shape[0]} logit rows vs {labels.shape[0]} labels")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise UndefinedMeanError("every position is ignored; mean loss undefined")
    picked = labels[valid]
    if picked.min() < 0 or picked.max() >= V:
        raise VocabError(f"label out of range [0, {V})")
    logp = log_softmax_np(flat)
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, picked].sum() / count

    def fn(g):
        d = np.exp(logp)
        d[rows, picked] -= 1.0
        d[~valid] = 0.0
        d *= g / count
        return (d.reshape(logits.shape).astype(logits.data.dtype),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), fn, "softmax_xent")


# ------------------------------------------------------------------ parameters

class ParamStore:
    """Named trainable tensors with a frozen flag each.

    Freezing turns off ``requires_grad`` so no gradient work is spent on the
    tensor, and :class:`Adam` never touches it.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name: str, array: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=DEFAULT_DTYPE).copy(), requires_grad=not frozen, name=name)
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def freeze(self, names: Iterable[str] | None = None) -> None:
        for n in (self._params if names is None else names):
            self._frozen.add(n)
            self._params[n].requires_grad = False
            self._params[n].grad = None

    def unfreeze(self, names: Iterable[str] | None = None) -> None:
        for n in (self._params if names is None else names):
            self._frozen.discard(n)
            self._params[n].requires_grad = True

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if n not in self._frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, arr in state.items():
            if tuple(arr.shape) != self._params[n].shape:
                raise DimensionError(f"{n}: shape {arr.shape} != {self._params[n].shape}")
            self._params[n].data = np.asarray(arr, dtype=DEFAULT_DTYPE).copy()


# ------------------------------------------------------------------ optimizer

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update. Returns (new_param, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    new = param - lr * mhat / (np.sqrt(vhat) + eps)
    return new.astype(param.dtype), m, v


class Adam:
    def __init__(self, stores: Sequence[ParamStore], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.stores = list(stores)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for s in self.stores:
            s.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        pending = []
        for si, store in enumerate(self.stores):
            for name, p in store.trainable():
                if p.grad is None:
                    continue
                if not np.isfinite(p.grad).all():
                    bad = int((~np.isfinite(p.grad)).sum())
                    raise NonFiniteError(
                        f"non-finite gradient in {name!r} ({bad} entries) at optimizer step {self.t + 1}")
                pending.append((id(p), p))
        self.t += 1
        for key, p in pending:
            m, v = self.state.get(key, (np.zeros_like(p.data), np.zeros_like(p.data)))
            p.data, m, v = adam_step(p.data, p.grad.astype(p.data.dtype), m, v, self.t,
                                     lr, self.betas, self.eps)
            self.state[key] = (m, v)


# ------------------------------------------------------------- gradient check

def _eval_traced(f: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    """Objective value and the sign pattern of every ReLU input it touched."""
    global _relu_trace
    prev, _relu_trace = _relu_trace, []
    try:
        with no_grad():
            val = float(f().data)
        return val, _relu_trace
    finally:
        _relu_trace = prev


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                 skip_kinks: bool = False) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. ``params``, evaluated in float64.

    With ``skip_kinks`` a coordinate whose +-h probe flips the sign of any
    ReLU input is not differentiable over the probe interval; its entry is
    NaN instead of a meaningless slope.
    """
    originals = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        base = _eval_traced(f)[1] if skip_kinks else None
        out = []
        for p in params:
            g = np.zeros(p.shape, dtype=np.float64)
            for idx in np.ndindex(*p.shape):
                x0 = p.data[idx]
                p.data[idx] = x0 + h
                fp, pat_p = _eval_traced(f)
                p.data[idx] = x0 - h
                fm, pat_m = _eval_traced(f)
                p.data[idx] = x0
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"objective is non-finite near {p.name}{idx}")
                if skip_kinks and not (_same_pattern(base, pat_p) and _same_pattern(base, pat_m)):
                    g[idx] = np.nan
                else:
                    g[idx] = (fp - fm) / (2.0 * h)
            out.append(g)
        return out
    finally:
        for p, d in zip(params, originals):
            p.data = d


def grad_check_stats(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                     skip_kinks: bool = False) -> tuple[float, int, int]:
    """Analytic vs central-difference gradients: (max deviation, compared, skipped).

    The analytic gradient comes from :func:`backward` at the parameters' own
    precision; the finite-difference oracle runs in float64. Each coordinate's
    absolute deviation is divided by max(|a|_inf, |n|_inf, 1e-8), the scale of
    the whole gradient. ``skip_kinks`` leaves out coordinates whose probe
    crosses a ReLU kink (see :func:`numeric_grad`).
    """
    saved = [(p.grad, p.requires_grad) for p in params]
    try:
        for p in params:
            p.grad = None
            p.requires_grad = True
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("objective is non-finite at the check point")
        backward(loss)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    finally:
        for p, (g, rg) in zip(params, saved):
            p.grad, p.requires_grad = g, rg
    numeric = numeric_grad(f, params, h, skip_kinks)
    a = np.concatenate([x.ravel() for x in analytic]) if analytic else np.zeros(0)
    n = np.concatenate([x.ravel() for x in numeric]) if numeric else np.zeros(0)
    keep = ~np.isnan(n)
    skipped = int(n.size - keep.sum())
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0, 0, skipped
    denom = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / denom), int(a.size), skipped


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
               skip_kinks: bool = False) -> float:
    """Max deviation part of :func:`grad_check_stats`."""
    return grad_check_stats(f, params, h, skip_kinks)[0]
