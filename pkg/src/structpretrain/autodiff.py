"""A small tape-based reverse-mode autodiff engine over float64 numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded together with their
pullbacks; ``tape.backward(loss, params)`` then walks the record in reverse. Outside an
active tape the same functions simply compute values, which is what inference and
finite-difference checks use.
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DEBUG = bool(int(os.environ.get("STRUCTPRETRAIN_DEBUG", "0")))


class ShapeError(ValueError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of primitive ops for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` for ``params`` (zeros for any parameter off-path).

        Also stores each gradient on ``param.grad``.
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, inputs, pullback, _ in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, pullback(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = []
        for p in params or ():
            gp = grads.get(id(p))
            gp = np.zeros_like(p.value) if gp is None else np.asarray(gp, dtype=np.float64).reshape(p.shape)
            p.grad = gp
            result.append(gp)
        return result


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], pullback: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op}: non-finite output")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.records.append((out, inputs, pullback, op))
    return out


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """True when ``b`` is broadcast as a row vector across the rows of ``a``."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return True
    raise ShapeError(op, f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g.sum(axis=0).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    bc = _row_broadcast("add", a, b)
    bshape = b.shape
    return _emit("add", a.value + b.value.reshape(-1) if bc else a.value + b.value, (a, b),
                 lambda g: (g, _unbroadcast(g, bshape) if bc else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    bc = _row_broadcast("sub", a, b)
    bshape = b.shape
    return _emit("sub", a.value - b.value.reshape(-1) if bc else a.value - b.value, (a, b),
                 lambda g: (g, -_unbroadcast(g, bshape) if bc else -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    bc = _row_broadcast("mul", a, b)
    av, bv = a.value, b.value
    bflat = bv.reshape(-1) if bc else bv

    def pullback(g):
        gb = g * av
        return g * bflat, (_unbroadcast(gb, bv.shape) if bc else gb)

    return _emit("mul", av * bflat, (a, b), pullback)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse constant matrix times dense tensor."""
    if x.ndim != 2 or adj.shape[1] != x.shape[0]:
        raise ShapeError("spmm", f"cannot multiply sparse {adj.shape} by {x.shape}")
    adj_t = adj.T.tocsr()
    return _emit("spmm", np.asarray(adj @ x.value), (x,), lambda g: (np.asarray(adj_t @ g),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", f"expects a matrix, got {a.shape}")
    return _emit("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        val = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return _emit("reshape", val, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(constant(t) for t in tensors)
    try:
        val = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", val, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows", "index must be one-dimensional")
    shape = a.shape

    def pullback(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", a.value[idx], (a,), pullback)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.value.size
    return _emit("mean", np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a matrix, shape (1, d)."""
    if a.ndim != 2:
        raise ShapeError("mean_rows", f"expects a matrix, got {a.shape}")
    rows = a.shape[0]
    return _emit("mean_rows", a.value.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / rows, (rows, g.shape[1])).copy(),))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (a vector is treated as one row)."""
    x = a.value
    x2 = x.reshape(1, -1) if x.ndim == 1 else x
    if x2.ndim != 2:
        raise ShapeError("softmax", f"expects a vector or matrix, got {x.shape}")
    e = np.exp(x2 - x2.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def pullback(g):
        g2 = g.reshape(y.shape)
        return ((y * (g2 - (g2 * y).sum(axis=1, keepdims=True))).reshape(x.shape),)

    return _emit("softmax", y.reshape(x.shape), (a,), pullback)


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_l weights[l] * tensors[l] for same-shaped tensors and a length-L weight vector."""
    tensors = tuple(tensors)
    w = weights.value.reshape(-1)
    if len(w) != len(tensors) or len({t.shape for t in tensors}) != 1:
        raise ShapeError("weighted_sum", "need L equally shaped tensors and L weights")
    vals = [t.value for t in tensors]
    out = sum(wi * v for wi, v in zip(w, vals))
    wshape = weights.shape

    def pullback(g):
        gw = np.array([(g * v).sum() for v in vals]).reshape(wshape)
        return tuple(g * wi for wi in w) + (gw,)

    return _emit("weighted_sum", out, tensors + (weights,), pullback)


def batch_norm(x: Tensor, gamma: Tensor, kappa: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column over all rows (nodes), then scale by gamma and shift by kappa."""
    if x.ndim != 2 or gamma.value.size != x.shape[1] or kappa.value.size != x.shape[1]:
        raise ShapeError("batch_norm", f"x {x.shape}, gamma {gamma.shape}, kappa {kappa.shape}")
    xv = x.value
    n = xv.shape[0]
    mu = xv.mean(axis=0)
    var = ((xv - mu) ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    gv = gamma.value.reshape(-1)
    gshape, kshape = gamma.shape, kappa.shape

    def pullback(g):
        dxhat = g * gv
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0).reshape(gshape), g.sum(axis=0).reshape(kshape)

    return _emit("batch_norm", gv * xhat + kappa.value.reshape(-1), (x, gamma, kappa), pullback)


def _weight_stack(op: str, W: Tensor, d1: int, d2: int) -> tuple[int, np.ndarray]:
    if W.ndim != 3 or W.shape[1] != d1 or W.shape[2] != d2:
        raise ShapeError(op, f"weight tensor {W.shape} does not match operand dims ({d1}, {d2})")
    return W.shape[0], W.value


def bilinear(x: Tensor, W: Tensor, y: Tensor) -> Tensor:
    """Row-paired bilinear forms: out[p, i] = x[p]^T W[i] y[p]; shapes (P,a), (k,a,b), (P,b)."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError("bilinear", f"row operands {x.shape} and {y.shape} must be paired")
    k, wv = _weight_stack("bilinear", W, x.shape[1], y.shape[1])
    xv, yv = x.value, y.value
    P, a = xv.shape
    b = yv.shape[1]
    xw = (xv @ wv.transpose(1, 0, 2).reshape(a, k * b)).reshape(P, k, b)
    out = np.einsum("pib,pb->pi", xw, yv)

    def pullback(g):
        wy = (yv @ wv.reshape(k * a, b).T).reshape(P, k, a)
        dx = np.einsum("pi,pia->pa", g, wy)
        dy = np.einsum("pi,pib->pb", g, xw)
        dW = ((g[:, :, None] * xv[:, None, :]).reshape(P, k * a).T @ yv).reshape(k, a, b)
        return dx, dW, dy

    return _emit("bilinear", out, (x, W, y), pullback)


def bilinear_cross(x: Tensor, W: Tensor, y: Tensor) -> Tensor:
    """All-pairs bilinear forms, rows ordered (u, c) -> u * m + c; shapes (n,a), (k,a,b), (m,b)."""
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("bilinear_cross", f"operands must be matrices, got {x.shape}, {y.shape}")
    k, wv = _weight_stack("bilinear_cross", W, x.shape[1], y.shape[1])
    xv, yv = x.value, y.value
    n, a = xv.shape
    m, b = yv.shape
    xw = (xv @ wv.transpose(1, 0, 2).reshape(a, k * b)).reshape(n, k, b)
    out = np.einsum("uib,cb->uci", xw, yv)

    def pullback(g):
        g3 = g.reshape(n, m, k)
        dxw = np.einsum("uci,cb->uib", g3, yv)
        dx = np.einsum("uib,iab->ua", dxw, wv)
        dy = np.einsum("uci,uib->cb", g3, xw)
        dW = np.einsum("ua,uib->iab", xv, dxw)
        return dx, dW, dy

    return _emit("bilinear_cross", out.reshape(n * m, k), (x, W, y), pullback)


# ---------------------------------------------------------------------------
# losses

def softplus_np(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(z: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(z) against labels, in log-sum-exp form."""
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    zv = z.value
    if zv.size == 0:
        raise ContractError("bce_with_logits on an empty batch")
    loss = (softplus_np(zv) - y * zv).mean()
    n = zv.size
    return _emit("bce_with_logits", np.asarray(loss), (z,), lambda g: (float(g) * (_sigmoid(zv) - y) / n,))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over rows for integer class targets."""
    t = np.asarray(targets, dtype=np.int64)
    lv = logits.value
    if lv.ndim != 2 or len(t) != lv.shape[0]:
        raise ShapeError("cross_entropy", f"logits {lv.shape} vs {len(t)} targets")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    loss = (logz - shifted[rows, t]).mean()

    def pullback(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, t] -= 1.0
        return (float(g) * p / len(t),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), pullback)


# ---------------------------------------------------------------------------
# gradient check and optimizer

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords: int | None = 24, rng: np.random.Generator | None = None) -> float:
    """Max over sampled coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    ``f`` must rebuild the loss from the current parameter values on each call.
    """
    with Tape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            g_fd = (fp - fm) / (2 * h)
            g_ad = ga.reshape(-1)[i]
            err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
            worst = max(worst, err)
    return worst


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """Update every parameter named in ``grads`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in grads:
            p, g = params[name], grads[name]
            if g.shape != p.shape:
                raise ShapeError("adam", f"gradient {g.shape} vs parameter {p.shape} for {name}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out
