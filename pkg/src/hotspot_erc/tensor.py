"""Dense float64 tensors with a reverse-mode tape.

Every tensor produced by an op keeps references to its parents and a closure
that maps the output gradient to parent gradients. ``Tensor.backward`` walks
the graph in reverse topological order and accumulates into ``.grad``.

Broadcasting is deliberately narrow: binary elementwise ops require operands
of equal rank whose extents either match or are 1 (the L x 1 gate against an
L x d matrix is the motivating case). Matmul additionally accepts a 2-D
operand against a stack of matrices (shared weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -np.inf

_GUARD = {"nonfinite": False}


class ShapeError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_nonfinite_guard(enabled: bool) -> None:
    """Raise ``NonFiniteError`` whenever an op produces inf/nan values."""
    _GUARD["nonfinite"] = bool(enabled)


def nonfinite_guard_enabled() -> bool:
    return _GUARD["nonfinite"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str, check: bool = True) -> Tensor:
    if check and _GUARD["nonfinite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op '{op}' with shape {data.shape}")
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (a, b) in enumerate(zip(shape, g.shape)) if a == 1 and b != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, (a,), lambda g: (g / x,), "log")


def xlogx(a: Tensor) -> Tensor:
    """x*log(x) with the 0*log(0) = 0 convention; inputs must be >= 0."""
    x = a.data
    if np.any(x < 0):
        raise ValueError("xlogx is defined for non-negative inputs only")
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    out = np.where(pos, x * np.log(safe), 0.0)
    return _make(out, (a,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),), "xlogx")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "exp": exp,
    "neg": neg,
}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op '{op}'") from None
    return fn(*inputs)


# ---------------------------------------------------------------- linear algebra


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        if a.ndim != b.ndim or any(x != y and 1 not in (x, y) for x, y in zip(a.shape[:-2], b.shape[:-2])):
            raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data
    return _make(
        ad @ bd,
        (a, b),
        lambda g: (_unbroadcast(g @ _swap(bd), ad.shape), _unbroadcast(_swap(ad) @ g, bd.shape)),
        "matmul",
    )


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b``; a 1-D bias is shared across all leading axes."""
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _make(
            out,
            (x, w),
            lambda g: (_unbroadcast(g @ _swap(wd), xd.shape), _unbroadcast(_swap(xd) @ g, wd.shape)),
            "affine",
        )
    if b.shape[-1] != out.shape[-1] or b.ndim > out.ndim:
        raise ShapeError(f"affine: bias {b.shape} does not match output {out.shape}")
    bshape = b.shape
    return _make(
        out + b.data,
        (x, w, b),
        lambda g: (
            _unbroadcast(g @ _swap(wd), xd.shape),
            _unbroadcast(_swap(xd) @ g, wd.shape),
            _unbroadcast(g, bshape),
        ),
        "affine",
    )


# ---------------------------------------------------------------- reductions & shape


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), back, "sum")


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[_norm_axis(axis, x.ndim)]
    return scale(sum(x, axis, keepdims), 1.0 / n)


def reduce(op: str, x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if op == "sum":
        return sum(x, axis, keepdims)
    if op == "mean":
        return mean(x, axis, keepdims)
    raise ValueError(f"unknown reduction '{op}'")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0]
    ax = _norm_axis(axis, ref.ndim)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape))
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} along axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),), "broadcast")


def gather(x: Tensor, index) -> Tensor:
    """Advanced indexing ``x[index]``; repeated indices accumulate in backward."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), back, "gather")


def scatter_add(x: Tensor, index: np.ndarray, size: int) -> Tensor:
    """Rows of ``x`` summed into a fresh ``size``-row tensor at ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise ShapeError(f"scatter_add: index {index.shape} vs rows {x.shape[0]}")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError(f"scatter_add: index out of range for {size} rows")
    out = np.zeros((size,) + x.shape[1:])
    np.add.at(out, index, x.data)
    return _make(out, (x,), lambda g: (g[index],), "scatter_add")


# ---------------------------------------------------------------- softmax family


def masked_fill(x: Tensor, keep: np.ndarray) -> Tensor:
    """Replace entries where ``keep`` is False by the -inf sentinel."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.data, NEG_INF)
    return _make(out, (x,), lambda g: (np.where(keep, g, 0.0),), "masked_fill", check=False)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    d = x.data
    if np.any(np.isnan(d)) or np.any(d == np.inf):
        raise NonFiniteError("softmax: inputs must be finite or the -inf mask sentinel")
    m = d.max(axis=ax, keepdims=True)
    if np.any(m == NEG_INF):
        raise DegenerateMaskError("softmax: every entry along the axis is masked")
    e = np.exp(d - m)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    d = x.data
    m = d.max(axis=ax, keepdims=True)
    if np.any(m == NEG_INF):
        raise DegenerateMaskError("log_softmax: every entry along the axis is masked")
    shifted = d - m
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by a feature-wise affine."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, shift.shape)

    return _make(xhat * gd + shift.data, (x, gain, shift), back, "layer_norm")


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"


GRAD_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps identically-zero gradients (e.g. attention key biases,
    which softmax cancels) from comparing central-difference roundoff with 0.
    """
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5, coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` at flat ``coords`` (all by default)."""
    flat = x.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    grad = np.zeros(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        hi = f().item()
        flat[i] = orig - step
        lo = f().item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"gradient check aborted: non-finite value at flat index {i} of input {x.shape}")
        grad[j] = (hi - lo) / (2.0 * step)
    return grad


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` is re-evaluated with perturbed input values, so it must read the
    inputs' ``data`` freshly on every call. With ``max_coords`` only that
    many randomly chosen coordinates per input are differenced.
    """
    if isinstance(inputs, dict):
        names, tensors = list(inputs), list(inputs.values())
    else:
        tensors = list(inputs)
        names = [f"input{i}" for i in range(len(tensors))]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.item()):
        raise NonFiniteError("gradient check aborted: non-finite function value at the base point")
    out.backward()
    rng = rng or np.random.default_rng(0)
    errors = []
    for t in tensors:
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
            analytic = analytic[coords]
        errors.append(relative_error(analytic, numerical_gradient(f, t, step, coords)))
    return GradCheckReport(max(errors) if errors else 0.0, tol, errors, names)
