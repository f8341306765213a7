"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on a :class:`Tensor` that depends on a gradient-requiring
input records a node with a monotonically increasing id. :func:`backward`
walks the reachable nodes in reverse id order, so accumulation order is the
insertion order of the forward pass and repeated runs are bit-identical.

Tensors that do not depend on any gradient-requiring input are constants:
they carry no node id and record nothing, which makes eval-mode forwards
cheap.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, LabelError

_node_ids = itertools.count()

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """An immutable float64 array, optionally a node of the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids) if self.requires_grad else None
        self.op = op if self.requires_grad else "const"
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    """A gradient-requiring leaf holding a private copy of ``x``."""
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def custom_op(data, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Record an operation with a user-supplied backward rule.

    ``backward(g)`` receives the upstream gradient and must return one
    gradient array (or ``None``) per parent, already shaped like the parent.
    """
    parents = tuple(as_tensor(p) for p in parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return custom_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return custom_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return custom_op(a.data**p, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def backward(g):
        return unbroadcast(np.where(take_a, g, 0.0), a.shape), unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return custom_op(np.minimum(a.data, b.data), (a, b), backward, "minimum")


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size // max(np.asarray(a.data.sum(axis=axis)).size, 1)
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros(a.shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return custom_op(a.data[index], (a,), backward, "getitem")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return custom_op(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and neural-network primitives


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return custom_op(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return custom_op(out, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv_std * (
                gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op(out, (x, gain, bias), backward, "layer_norm")


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    x = as_tensor(x)
    cdf = ndtr(x.data)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
        return (g * (cdf + x.data * pdf),)

    return custom_op(x.data * cdf, (x,), backward, "gelu")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return as_tensor(x)
    keep = (rng.random(as_tensor(x).shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, keep)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy expects [B,K] logits for {labels.shape[0]} labels, got {logits.shape}")
    k = logits.shape[1]
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise LabelError(f"label {int(labels[bad[0]])} at index {int(bad[0])} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = float(np.mean(lse - z[rows, labels]))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / labels.shape[0]),)

    return custom_op(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

    Leaves requiring gradients get their ``.grad`` set. Tensors listed in
    ``wrt`` that the loss does not depend on receive zero gradients.
    Returns a map from node id to gradient array.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        nodes: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node_id in nodes:
                continue
            nodes[t.node_id] = t
            stack.extend(p for p in t._parents if p.requires_grad and p.node_id not in nodes)
        grads[loss.node_id] = np.ones(loss.shape)
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.get(nid)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = parent.node_id
                grads[pid] = grads[pid] + pg if pid in grads else pg
    for t in wrt or ():
        if t.node_id not in grads:
            zero = np.zeros(t.shape)
            t.grad = zero
            if t.node_id is not None:
                grads[t.node_id] = zero
    return grads


def value_and_grad(
    fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves built from ``params`` and differentiate it."""
    leaves = {name: parameter(value) for name, value in params.items()}
    loss = fn(leaves)
    backward(loss, wrt=list(leaves.values()))
    return float(loss.data.reshape(-1)[0]), {name: leaf.grad for name, leaf in leaves.items()}


def evaluate(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]) -> float:
    """Evaluate ``fn`` on constants; records no graph."""
    out = fn({name: Tensor(value) for name, value in params.items()})
    return float(out.data.reshape(-1)[0])


# ---------------------------------------------------------------------------
# verification harness


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float
    tolerance: float
    n_checked: int
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, coordinate by coordinate.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true gradient is ~0 from dominating.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    base = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    _, analytic = value_and_grad(fn, base)
    report = GradCheckReport(0.0, None, None, 0.0, 0.0, tolerance, 0)
    for name, value in base.items():
        worst_here = 0.0
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + step
            up = evaluate(fn, base)
            value[idx] = orig - step
            down = evaluate(fn, base)
            value[idx] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name][idx])
            err = float(relative_error(a, numeric, floor))
            report.n_checked += 1
            worst_here = max(worst_here, err)
            if err > report.max_rel_error or report.worst_param is None:
                report.max_rel_error = err
                report.worst_param, report.worst_index = name, idx
                report.analytic, report.numeric = a, numeric
        report.errors[name] = worst_here
    return report
