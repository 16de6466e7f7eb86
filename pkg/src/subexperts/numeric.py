"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of operations the adapters and the frozen transformer need
are provided. Arrays are numpy float64 in C order; there is no broadcasting
except scalar scaling, a bias vector along the last axis, and the per-row
scaling used for router gates.

A node records its parents and a closure mapping the output gradient to one
gradient per parent. Constant inputs never build graph nodes, so the same
functions double as a fast inference path.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, EvaluationError, InputError

_GELU_C = np.sqrt(2.0 / np.pi)


class DTensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64 and data.flags.c_contiguous
        ) else data
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "DTensor":
        return DTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"DTensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[DTensor] = []
        seen: set[int] = set()
        stack: list[tuple[DTensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def tensor(data, requires_grad: bool = False, name: str | None = None) -> DTensor:
    return DTensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> DTensor:
    if any(p.requires_grad for p in parents):
        return DTensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return DTensor(data)


def _unbroadcast_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a: DTensor, b: DTensor) -> DTensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    sb = b.shape
    return _node(a.data + b.data, (a, b), lambda g: (g, _unbroadcast_to(g, sb)))


def sub(a: DTensor, b: DTensor) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: DTensor, b: DTensor) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: DTensor, c: float) -> DTensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def row_scale(x: DTensor, s: DTensor) -> DTensor:
    """Multiply row ``i`` of a 2-D tensor by ``s[i]``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.data.ndim != 2 or s.shape != (x.shape[0],):
        raise DimensionError(f"row_scale: shapes {x.shape} and {s.shape} are incompatible")
    col = s.data[:, None]
    return _node(x.data * col, (x, s), lambda g: (g * col, (g * x.data).sum(axis=1)))


def gelu(x: DTensor) -> DTensor:
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _node(out, (x,), bw)


# --- shape ----------------------------------------------------------------

def reshape(x: DTensor, shape: Sequence[int]) -> DTensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: DTensor, axes: Sequence[int]) -> DTensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(x: DTensor) -> DTensor:
    """Swap the last two axes."""
    axes = list(range(x.data.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return permute(x, axes)


def concat(xs: Sequence[DTensor], axis: int = 0) -> DTensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _node(out, tuple(xs), bw)


def slice_axis(x: DTensor, axis: int, start: int, stop: int) -> DTensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _node(np.ascontiguousarray(x.data[idx]), (x,), bw)


def column(x: DTensor, j: int) -> DTensor:
    """Column ``j`` of a 2-D tensor as a 1-D tensor."""
    return reshape(slice_axis(x, 1, j, j + 1), (x.shape[0],))


def take_rows(x: DTensor, rows: Sequence[int]) -> DTensor:
    """Rows ``rows`` of ``x`` along the first axis, in the given order."""
    x = as_tensor(x)
    idx = np.asarray(rows, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), bw)


def repeat_batch(x: DTensor, n: int) -> DTensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    x = as_tensor(x)
    return _node(np.broadcast_to(x.data, (n,) + x.shape).copy(), (x,), lambda g: (g.sum(axis=0),))


# --- reductions -------------------------------------------------------------

def sum_all(x: DTensor) -> DTensor:
    x = as_tensor(x)
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: DTensor, axis: int | None = None) -> DTensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
        return _node(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))
    n = x.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _node(x.data.mean(axis=axis), (x,), bw)


# --- linear algebra ---------------------------------------------------------

def matmul(a: DTensor, b: DTensor) -> DTensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix or has
    exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), bw)


# --- probability ------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: DTensor, axis: int = -1) -> DTensor:
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis (shape {x.shape})")
    p = _softmax_np(x.data, axis)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (x,), bw)


def log_softmax(x: DTensor, axis: int = -1) -> DTensor:
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: DTensor, labels: Sequence[int]) -> DTensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x C logits, got {logits.shape}")
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows but {y.shape[0]} labels")
    if n and (y.min() < 0 or y.max() >= c):
        raise InputError(f"label out of range [0, {c}): {y.tolist()}")
    ls = log_softmax(logits, axis=1)
    rows = np.arange(n)

    def bw(g):
        full = np.zeros((n, c))
        full[rows, y] = -float(g) / n
        return (full,)

    return _node(np.array(-ls.data[rows, y].mean()), (ls,), bw)


def topk_indices(x: Iterable[float], k: int) -> list[int]:
    """Indices of the ``k`` largest values, largest first; ties go to the lower index."""
    arr = np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=np.float64).reshape(-1)
    if not 1 <= k <= arr.size:
        raise InputError(f"k={k} outside [1, {arr.size}]")
    return np.argsort(-arr, kind="stable")[:k].tolist()


def topk_gates(logits: DTensor, k: int) -> DTensor:
    """Per-row routing gates: softmax restricted to the row's top-``k`` logits.

    Equal to taking the full softmax, keeping the top-``k`` probabilities and
    renormalising them to sum to one. Unselected entries are exactly zero and
    receive no gradient.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"topk_gates expects n x N logits, got {logits.shape}")
    n, big_n = logits.shape
    if not 1 <= k <= big_n:
        raise InputError(f"top-k of {k} outside [1, {big_n}]")
    order = np.argsort(-logits.data, axis=1, kind="stable")[:, :k]
    sel = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=1)
    z = np.where(sel, logits.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(sel, np.exp(z), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (logits,), bw)


def layer_norm(x: DTensor, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> DTensor:
    """Layer norm over the last axis with constant (frozen) affine parameters."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gh = g * gamma
        return (inv * (gh - gh.mean(axis=-1, keepdims=True)
                       - xhat * (gh * xhat).mean(axis=-1, keepdims=True)),)

    return _node(xhat * gamma + beta, (x,), bw)


# --- masks and geometry -----------------------------------------------------

def masked_weight(w: DTensor, mask: np.ndarray, scores: DTensor | None = None) -> DTensor:
    """``w * mask`` with a straight-through score gradient.

    The weight gradient is ``g * mask``; when ``scores`` is given it receives
    ``g * w`` on every entry, selected or not.
    """
    w = as_tensor(w)
    m = np.asarray(mask, dtype=np.float64).reshape(w.shape)
    if scores is None:
        return _node(w.data * m, (w,), lambda g: (g * m,))
    if scores.shape != w.shape:
        raise DimensionError(f"scores {scores.shape} do not match weight {w.shape}")
    return _node(w.data * m, (w, scores), lambda g: (g * m, g * w.data))


def _norm_or_raise(v: np.ndarray, what: str) -> np.ndarray:
    n = np.sqrt((v * v).sum(axis=-1))
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise DegenerateInputError(f"{what} has zero or non-finite norm")
    return n


def cosine_similarity(u: DTensor, v: DTensor) -> DTensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape}")
    return reshape(cosine_rows(reshape(u, (1, u.size)), v), ())


def cosine_rows(q: DTensor, k: DTensor) -> DTensor:
    """Cosine similarity of each row of ``q`` with the vector ``k``."""
    q, k = as_tensor(q), as_tensor(k)
    if q.data.ndim != 2 or k.shape != (q.shape[1],):
        raise DimensionError(f"cosine_rows: shapes {q.shape} and {k.shape}")
    nq = _norm_or_raise(q.data, "query")
    nk = float(_norm_or_raise(k.data, "key"))
    dots = q.data @ k.data
    out = dots / (nq * nk)

    def bw(g):
        gq = (g / (nq * nk))[:, None] * k.data[None, :] - (g * out / nq**2)[:, None] * q.data
        gk = ((g / nq)[:, None] * q.data).sum(axis=0) / nk - (g * out).sum() * k.data / nk**2
        return gq, gk

    return _node(np.clip(out, -1.0, 1.0), (q, k), bw)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = _norm_or_raise(v, "vector")
    return v / (n[..., None] if v.ndim > 1 else n)


# --- randomness -----------------------------------------------------------

def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, labels...)``.

    Every random draw in the package names its stream so that runs, resumes and
    checkpoints are pure functions of the seed.
    """
    digest = hashlib.sha256(repr(tuple(str(x) for x in labels)).encode("utf-8")).digest()
    words = tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    seq = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=words)
    return np.random.Generator(np.random.PCG64(seq))


# --- verification -----------------------------------------------------------

def grad_check(f: Callable[[], DTensor], x: DTensor, h: float = 1e-5) -> float:
    """Max relative error between ``x.grad`` from backprop and central differences.

    ``f`` must rebuild the scalar from the current ``x.data`` on every call.
    The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise EvaluationError("f is not finite at x")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"f is not finite near entry {i}")
        numeric[i] = (fp - fm) / (2 * h)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
