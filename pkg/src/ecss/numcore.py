"""Dense f64 tensors with tape-free reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient the output keeps references to its inputs plus a closure that maps
the output gradient to input gradients; :func:`backward` walks that graph in
reverse topological order. Data is a plain ``numpy.ndarray`` so callers can
drop down to numpy whenever no gradient is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "clamp_min",
    "sigmoid",
    "silu",
    "softplus",
    "relu",
    "softmax",
    "layer_norm",
    "causal_depthwise_conv1d",
    "getitem",
    "concat",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "record",
    "topological_order",
    "backward",
    "zero_grad",
    "grad_check",
    "GradCheckReport",
    "seeded_rng",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


def _shape_error(op: str, *shapes) -> ShapeError:
    desc = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {desc}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        # leaves carry a live accumulator; interior nodes get theirs during backward()
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``grad_fn(g)`` must return one gradient (or ``None``) per parent, each
    shaped like that parent. Nothing is recorded when no parent needs a
    gradient, so inference runs do not retain the graph.
    """
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=grad_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), grad_fn, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), grad_fn, "matmul")


# -------------------------------------------------------------- elementwise


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a, lo: float) -> Tensor:
    a = _as_tensor(a)
    keep = a.data >= lo
    return record(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return record(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return record(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (a,), grad_fn, "softmax")


def layer_norm(a, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale and shift."""
    a, scale, shift = _as_tensor(a), _as_tensor(scale), _as_tensor(shift)
    d = a.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise _shape_error("layer_norm", a.shape, scale.shape, shift.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def grad_fn(g):
        gxhat = g * scale.data
        ga = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        gscale = (flat * xhat.reshape(-1, d)).sum(axis=0)
        gshift = flat.sum(axis=0)
        return ga, gscale, gshift

    return record(out, (a, scale, shift), grad_fn, "layer_norm")


def causal_depthwise_conv1d(x, weight, bias) -> Tensor:
    """Per-channel causal convolution along the sequence axis.

    ``x`` is ``(..., L, C)``, ``weight`` is ``(C, k)``, ``bias`` is ``(C,)``.
    The input is left-padded with ``k - 1`` zeros, so
    ``out[t, c] = bias[c] + sum_j weight[c, j] * x[t - (k - 1) + j, c]``.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim < 2 or weight.ndim != 2 or weight.shape[0] != x.shape[-1] or bias.shape != (x.shape[-1],):
        raise _shape_error("causal_depthwise_conv1d", x.shape, weight.shape, bias.shape)
    L = x.shape[-2]
    k = weight.shape[1]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(k):
        out += weight.data[:, j] * xp[..., j:j + L, :]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for j in range(k):
            gxp[..., j:j + L, :] += g * weight.data[:, j]
            gw[:, j] = (g * xp[..., j:j + L, :]).reshape(-1, x.shape[-1]).sum(axis=0)
        gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gxp[..., k - 1:, :], gw, gb

    return record(out, (x, weight, bias), grad_fn, "causal_depthwise_conv1d")


# ------------------------------------------------------------ shape plumbing


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        if advanced:
            np.add.at(ga, idx, g)
        else:
            ga[idx] = g
        return (ga,)

    return record(np.array(out), (a,), grad_fn, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, ts, grad_fn, "concat")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise _shape_error("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------ backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that take part in differentiation, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_error.values())

    def failures(self) -> dict[str, float]:
        return {k: e for k, e in self.max_error.items() if e >= self.tol}

    def __str__(self) -> str:
        lines = [f"{name}: {err:.3e} {'ok' if err < self.tol else 'FAIL'}"
                 for name, err in self.max_error.items()]
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``params`` is a mapping name -> Tensor (or a sequence, named by index).
    Parameters are perturbed in place and restored. Errors are relative,
    except where the analytic gradient is below ``floor`` in magnitude;
    those elements are scored by absolute error so difference noise around
    a vanishing gradient is not amplified.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    zero_grad(params.values())
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite forward value")
    backward(loss)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite forward value perturbing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            if abs(a) >= floor:
                err /= max(abs(a), abs(numeric))
            worst = max(worst, err)
        report.max_error[name] = worst
    zero_grad(params.values())
    return report


# ----------------------------------------------------------------------- rng


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded with a 64-bit integer.

    Uniforms use numpy's 53-bit float conversion; normals use numpy's
    ziggurat transform. Both are fixed for a given numpy major version and
    identical across platforms.
    """
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
