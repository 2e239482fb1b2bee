"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the op set needed by the prompt engine is provided. There is no
broadcasting: binary elementwise ops require identical shapes, and
``matmul`` requires identical leading (batch) dimensions.

Usage::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        loss = (x * x).sum()
    (grad,) = tape.gradient(loss, [x])
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GradTape",
    "GradCheckReport",
    "Tensor",
    "abs_",
    "abs_sum",
    "add",
    "check_gradients",
    "concat",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "power",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice_axis",
    "softmax",
    "square",
    "sub",
    "tensor_sum",
    "transpose",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_ACTIVE_TAPES: list["GradTape"] = []


class Tensor:
    """Immutable dense array of 64-bit floats."""

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal constructor; ``arr`` must already be a fresh float64 array
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.zeros(shape), requires_grad)

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operators -------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class GradTape:
    """Records ops executed inside its context for a single backward pass.

    Tapes nest; each active tape records every op whose inputs need a
    gradient. Call :meth:`clear` (or open a fresh tape) between steps.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    @property
    def op_names(self) -> list[str]:
        return [r.name for r in self.records]

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each of ``sources``.

        Sources that the target does not depend on get a zero array.
        """
        if target.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for rec in reversed(self.records):
            g_out = grads.get(id(rec.out))
            if g_out is None:
                continue
            g_ins = rec.backward(g_out)
            for inp, g in zip(rec.inputs, g_ins):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(name: str, out_arr: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, needs)
    if needs and _ACTIVE_TAPES:
        rec = _Record(out, inputs, backward, name)
        for tape in _ACTIVE_TAPES:
            tape.records.append(rec)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")


# ---------------------------------------------------------------------------
# elementwise


def _is_number(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def add(a, b) -> Tensor:
    if _is_number(b):
        return _shift(_as_tensor(a), float(b))
    if _is_number(a):
        return _shift(_as_tensor(b), float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def _shift(a: Tensor, c: float) -> Tensor:
    return _record("shift", a.data + c, (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    if _is_number(b):
        return _shift(_as_tensor(a), -float(b))
    if _is_number(a):
        return _shift(scale(_as_tensor(b), -1.0), float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_number(a):
        return scale(b, float(a))
    if _is_number(b):
        return scale(a, float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    return _record("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def power(x: Tensor, p: float) -> Tensor:
    """x**p for x >= 0; the derivative at x == 0 is taken as 0."""
    xd = x.data
    out = xd**p
    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(xd > 0, p * xd ** (p - 1.0), 0.0)
        return (g * d,)
    return _record("power", out, (x,), back)


def abs_(x: Tensor) -> Tensor:
    """|x|; the subgradient at 0 is 0."""
    sgn = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sgn,))


def abs_sum(x: Tensor) -> Tensor:
    """Scalar sum of |x|, subgradient sign(x) with sign(0) = 0."""
    sgn = np.sign(x.data)
    return _record("abs_sum", np.array(np.abs(x.data).sum()), (x,), lambda g: (g * sgn,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, np.reshape(g, ()).item()),))
    ax = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=ax)
    return _record("sum", out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim)]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return scale(tensor_sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from e
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    if a.ndim != b.ndim:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = _norm_axis(axis, a.ndim)
    for i, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if i != ax and sa != sb:
            raise DimensionError(f"concat along axis {ax}: shapes {a.shape} and {b.shape} differ on axis {i}")
    na = a.shape[ax]
    out = np.concatenate([a.data, b.data], axis=ax)

    def back(g):
        ga, gb = np.split(g, [na], axis=ax)
        return ga, gb

    return _record("concat", out, (a, b), back)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record("slice", x.data[idx], (x,), back)


# ---------------------------------------------------------------------------
# linear algebra and normalizers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _record("softmax", out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _record("log_softmax", out, (x,), back)


# ---------------------------------------------------------------------------
# finite-difference verifier


class NonFiniteEvaluation(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: tuple[int, int] | None  # (input index, flat element index)
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def check_gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                    tol: float = 1e-6, floor: float = 1e-10) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The relative error for each element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = [Tensor(t.data, requires_grad=True) for t in inputs]
    with GradTape() as tape:
        out = f(*inputs)
    analytic = tape.gradient(out, inputs)

    numeric = []
    worst, worst_err = None, 0.0
    for k, t in enumerate(inputs):
        base = t.data.copy()
        num = np.zeros_like(base)
        flat = num.reshape(-1)
        for i in range(base.size):
            vals = []
            for delta in (eps, -eps):
                pert = base.copy().reshape(-1)
                pert[i] += delta
                args = list(inputs)
                args[k] = Tensor(pert.reshape(base.shape))
                v = float(np.reshape(f(*args).data, -1)[0])
                if not math.isfinite(v):
                    raise NonFiniteEvaluation(f"non-finite f at input {k}, element {i} perturbed by {delta:+g}")
                vals.append(v)
            flat[i] = (vals[0] - vals[1]) / (2.0 * eps)
        numeric.append(num)
        a = analytic[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(flat)), floor)
        err = np.abs(a - flat) / denom
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst = (k, int(err.argmax()))
    return GradCheckReport(worst_err, tol, worst, analytic, numeric)


def _away_from_zero(rng: np.random.Generator, shape, lo: float = 0.2) -> np.ndarray:
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def gradcheck_suite(seed: int = 0, tol: float = 1e-6) -> dict[str, GradCheckReport]:
    """Finite-difference check of every differentiable op on small random inputs.

    Each op is wrapped in a weighted sum so the scalar output touches every
    element with a distinct coefficient.
    """
    rng = np.random.default_rng(seed)
    T = lambda a: Tensor(a)  # noqa: E731

    def weighted(fn, out_shape):
        w = Tensor(rng.normal(size=out_shape))
        return lambda *xs: tensor_sum(mul(fn(*xs), w))

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    cases = {
        "add": (weighted(add, (3, 4)), [T(a), T(b)]),
        "sub": (weighted(sub, (3, 4)), [T(a), T(b)]),
        "mul": (weighted(mul, (3, 4)), [T(a), T(b)]),
        "div": (weighted(div, (3, 4)), [T(a), T(pos)]),
        "scale": (weighted(lambda x: scale(x, -1.7), (3, 4)), [T(a)]),
        "relu": (weighted(relu, (3, 4)), [T(_away_from_zero(rng, (3, 4)))]),
        "exp": (weighted(exp, (3, 4)), [T(a)]),
        "log": (weighted(log, (3, 4)), [T(pos)]),
        "sigmoid": (weighted(sigmoid, (3, 4)), [T(a)]),
        "square": (weighted(square, (3, 4)), [T(a)]),
        "power": (weighted(lambda x: power(x, 2.5), (3, 4)), [T(pos)]),
        "abs": (weighted(abs_, (3, 4)), [T(_away_from_zero(rng, (3, 4)))]),
        "abs_sum": (abs_sum, [T(_away_from_zero(rng, (3, 4)))]),
        "sum_axis": (weighted(lambda x: tensor_sum(x, axis=0), (4,)), [T(a)]),
        "mean": (weighted(lambda x: mean(x, axis=1), (3,)), [T(a)]),
        "reshape": (weighted(lambda x: reshape(x, (2, 6)), (2, 6)), [T(a)]),
        "transpose": (weighted(lambda x: transpose(x), (4, 3)), [T(a)]),
        "concat": (weighted(lambda x, y: concat(x, y, axis=0), (6, 4)), [T(a), T(b)]),
        "slice": (weighted(lambda x: slice_axis(x, 1, 3, axis=1), (3, 2)), [T(a)]),
        "matmul": (weighted(matmul, (3, 5)), [T(a), T(rng.normal(size=(4, 5)))]),
        "batched_matmul": (weighted(matmul, (2, 3, 5)), [T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(2, 4, 5)))]),
        "softmax": (weighted(softmax, (3, 4)), [T(a)]),
        "log_softmax": (weighted(log_softmax, (3, 4)), [T(a)]),
    }
    return {name: check_gradients(f, xs, tol=tol) for name, (f, xs) in cases.items()}
