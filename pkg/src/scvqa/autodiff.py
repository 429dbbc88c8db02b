"""Reverse-mode automatic differentiation over float64 numpy arrays.

A dynamic tape: every operation returns a new Tensor that remembers its
parents and how to push gradients back to them. Everything is float64 and
CPU-only so finite-difference checks can be tight (1e-4 relative).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes do not fit the op signature."""


class NonFiniteError(AutodiffError):
    """A NaN or Inf appeared in a tensor (at construction or inside an op)."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backward().

    `parents` holds (tensor, pull) pairs where `pull(grad_out)` returns the
    gradient contribution for that parent. Tensors without grad-requiring
    parents are detached leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = ()):
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in node '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents

    # -- basic protocol -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    # -- backward -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of self into .grad of every reachable tensor."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_f64(grad)
            if grad.shape != self.shape:
                raise ShapeError("seed gradient shape mismatch")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
            for parent, pull in node._parents:
                pg = pull(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative to survive deep tapes (BPTT)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Iterable[tuple[Tensor, Callable]]) -> Tensor:
    live = tuple((p, fn) for p, fn in parents
                 if p.requires_grad or p._parents)
    out = Tensor(data, requires_grad=bool(live), op=op, parents=live)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and linear ops ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    return _make(out, "add", [(a, lambda g: _unbroadcast(g, a.shape)),
                              (b, lambda g: _unbroadcast(g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    return _make(out, "mul", [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                              (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make(out, "div",
                 [(a, lambda g: _unbroadcast(g / b.data, a.shape)),
                  (b, lambda g: _unbroadcast(-g * a.data / (b.data ** 2), b.shape))])


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    out = a.data ** p
    return _make(out, f"pow{p}",
                 [(a, lambda g: g * p * a.data ** (p - 1))])


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} vs {b.shape}") from e

    a1 = a.data.ndim == 1
    b1 = b.data.ndim == 1

    def pull_a(g):
        if a1 and b1:
            return g * b.data
        g2 = np.expand_dims(g, -2) if a1 else g
        if b1:
            g2 = np.expand_dims(g2, -1)
        bm = b.data[:, None] if b1 else b.data
        ga = g2 @ np.swapaxes(bm, -1, -2)
        if a1:
            ga = np.squeeze(ga, -2)
        return _unbroadcast(ga, a.shape)

    def pull_b(g):
        if a1 and b1:
            return g * a.data
        g2 = np.expand_dims(g, -2) if a1 else g
        if b1:
            g2 = np.expand_dims(g2, -1)
        am = a.data[None, :] if a1 else a.data
        gb = np.swapaxes(am, -1, -2) @ g2
        if b1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(gb, b.shape)

    return _make(out, "matmul", [(a, pull_a), (b, pull_b)])


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, "relu", [(a, lambda g: g * (a.data > 0))])


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, "exp", [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", [(a, lambda g: g / a.data)])


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", [(a, lambda g: g * (1.0 - out ** 2))])


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, "sigmoid", [(a, lambda g: g * out * (1.0 - out))])


# -- reductions and shape ops -------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.shape).copy()

    return _make(np.asarray(out), "sum", [(a, pull)])


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _make(out, "reshape", [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose",
                 [(a, lambda g: np.transpose(g, inv))])


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return _make(out, "swapaxes", [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concatenate: {e}")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def pull_for(i):
        def pull(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return pull

    return _make(out, "concat", [(t, pull_for(i)) for i, t in enumerate(ts)])


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def pull_for(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(out, "stack", [(t, pull_for(i)) for i, t in enumerate(ts)])


def take(a, idx) -> Tensor:
    """Fancy/basic indexing with scatter-add backward."""
    a = _wrap(a)
    out = a.data[idx]

    def pull(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return buf

    return _make(out, "take", [(a, pull)])


# -- softmax family and layernorm ---------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, "softmax", [(a, pull)])


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def pull(g):
        return g - soft * g.sum(axis=axis, keepdims=True)

    return _make(out, "log_softmax", [(a, pull)])


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (eps-corrected).

    Affine gain/bias, when wanted, are separate mul/add ops on the output.
    """
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    n = a.shape[-1]

    def pull(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return inv * (g - gm - xhat * gx)

    return _make(xhat, "layernorm", [(a, pull)])


# -- gradient utilities --------------------------------------------------------

def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every named parameter.

    Parameters the loss never touched come back as zero arrays.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    for p in params.values():
        p.zero_grad()
    loss.backward()
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


@dataclass
class GradCheckReport:
    passed: bool
    vacuous: bool
    tolerance: float
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst: list[tuple[str, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "VACUOUS" if self.vacuous else ("PASS" if self.passed else "FAIL")
        lines = [f"grad check: {status} (max rel err {self.max_rel_error:.3e}, "
                 f"tol {self.tolerance:.1e})"]
        for name, err in self.worst:
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               tolerance: float = 1e-4, step: float = 1e-5,
               max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn()` against central differences.

    `loss_fn` must rebuild the forward pass from the current parameter values
    on every call. With `max_entries` set, only that many randomly chosen
    coordinates per parameter are probed (big tensors).
    """
    loss = loss_fn()
    analytic = gradients(loss, params)
    per_param: dict[str, float] = {}
    vacuous = all(np.all(g == 0.0) for g in analytic.values())

    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_entries, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data.reshape(())[()])
            flat[i] = orig - step
            down = float(loss_fn().data.reshape(())[()])
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            denom = max(abs(ga[i]), abs(num), 1e-6)
            worst = max(worst, abs(ga[i] - num) / denom)
        per_param[name] = worst

    max_err = max(per_param.values()) if per_param else 0.0
    ranked = sorted(per_param.items(), key=lambda kv: -kv[1])[:5]
    return GradCheckReport(passed=max_err <= tolerance, vacuous=vacuous,
                           tolerance=tolerance, max_rel_error=max_err,
                           per_param=per_param, worst=ranked)
