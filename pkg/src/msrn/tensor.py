"""Dense double-precision tensors with reverse-mode differentiation.

The op vocabulary is deliberately small: exactly what the label-graph
attention, pooling, semantic attention and classification head need.
Every op checks its output for NaN/Inf and raises ``NonFiniteError`` naming
the op, so a blown-up training step fails loudly at its source.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the compute graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op evaluated inside.

    Two evaluations with equal patterns went through the same linear piece of
    every LeakyReLU/ELU/max-pool, which is what ``grad_check`` uses to skip
    coordinates that sit close to a kink.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(pattern.tobytes())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit seed needs a scalar output, got {self.shape}")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != self.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {self.shape}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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

        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite value in output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


# --------------------------------------------------------------------------
# unary nonlinearities
# --------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) in overflow-free form."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    _log_kink(pos)
    factor = np.where(pos, 1.0, slope)
    return _make("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    pos = x > 0
    _log_kink(pos)
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(pos, x, neg)
    deriv = np.where(pos, 1.0, neg + alpha)
    return _make("elu", out, (a,), lambda g: (g * deriv,))


# --------------------------------------------------------------------------
# reductions, normalisation, structure
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def softmax(a: Tensor, axis=-1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over one axis or a tuple of axes.

    With ``mask`` (boolean, broadcastable to ``a``) the normalisation runs
    only over the True entries; masked-out entries are exactly 0.
    """
    axes = _norm_axes(axis, a.ndim)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axes).all():
            raise ShapeError("softmax: mask leaves an empty normalisation set")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axes, keepdims=True)

    def bw(g):
        return (out * (g - (out * g).sum(axis=axes, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (indices may repeat)."""
    index = np.asarray(index, dtype=np.int64)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("take", out, (a,), bw)


def sq_l2(a, b, axis=-1) -> Tensor:
    """Squared Euclidean distance ``sum((a - b)**2)`` along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sq_l2", a, b)
    diff = a.data - b.data
    axes = _norm_axes(axis, diff.ndim)
    out = (diff * diff).sum(axis=axes)

    def bw(g):
        g2 = 2.0 * diff * np.expand_dims(g, axes)
        return _unbroadcast(g2, a.shape), _unbroadcast(-g2, b.shape)

    return _make("sq_l2", out, (a, b), bw)


# --------------------------------------------------------------------------
# spatial ops (channels-last)
# --------------------------------------------------------------------------

def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position linear map: ``x[..., C] @ w[C, F] + b[F]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv1x1: channel mismatch between {x.shape} and {w.shape}")
    out = matmul(x, w)
    return out if b is None else add(out, b)


def conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1, zero-padded 3x3 convolution. ``x`` is NHWC, ``w`` is (3,3,C,F)."""
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv3x3: incompatible shapes {x.shape} and {w.shape}")
    k = kernels.active()
    out = k.conv3x3_forward(x.data, w.data)

    def bw(g):
        return k.conv3x3_backward(x.data, w.data, g)

    return _make("conv3x3", out, (x, w), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2; ties route the gradient to the first maximum."""
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"maxpool2x2: spatial dims of {x.shape} must be even")
    k = kernels.active()
    out, arg = k.maxpool2_forward(x.data)
    _log_kink(arg)
    return _make("maxpool2x2", out, (x,), lambda g: (k.maxpool2_backward(arg, g, x.shape),))


# --------------------------------------------------------------------------
# static graphs over named leaves
# --------------------------------------------------------------------------

class Graph:
    """A computation over named leaves, run as forward-then-backward.

    ``fn`` receives a dict of leaf tensors and returns the output tensor.
    Ops are recorded in execution order, so the tape is topologically sorted
    by construction.
    """

    def __init__(self, fn: Callable[[dict[str, Tensor]], Tensor],
                 leaves: Mapping[str, tuple[int, ...]],
                 requires_grad: Iterable[str] | None = None):
        self.fn = fn
        self.leaves = {k: tuple(v) for k, v in leaves.items()}
        self.requires_grad = set(self.leaves if requires_grad is None else requires_grad)
        self._bound: dict[str, Tensor] | None = None
        self._out: Tensor | None = None

    def forward(self, bindings: Mapping[str, np.ndarray | Tensor]) -> Tensor:
        missing = set(self.leaves) - set(bindings)
        if missing:
            raise KeyError(f"forward: unbound leaves {sorted(missing)}")
        bound = {}
        for name, shape in self.leaves.items():
            value = bindings[name]
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"forward: leaf {name!r} expects {shape}, got {arr.shape}")
            bound[name] = Tensor(arr.copy(), requires_grad=name in self.requires_grad, name=name)
        self._bound = bound
        self._out = self.fn(bound)
        return self._out

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        if self._out is None:
            raise RuntimeError("backward called before forward")
        for t in self._bound.values():
            t.grad = None
        self._out.backward(seed)
        grads = {}
        for name, t in self._bound.items():
            if name in self.requires_grad:
                grads[name] = t.grad if t.grad is not None else np.zeros(t.shape)
        self._out = None  # intermediates are released with the output
        return grads


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

def grad_check(f: Callable, point, eps: float = 1e-5, *, kink_margin: float = 10.0,
               max_coords: int | None = None, seed: int = 0, floor: float | str = 1e-8) -> float:
    """Max relative error between backward and central differences.

    ``point`` is a Tensor/array or a mapping name -> Tensor/array; ``f`` is
    called with the same structure (of Tensors) and must return a scalar
    Tensor.  Coordinates whose perturbation by ``kink_margin * eps`` changes
    the branch pattern of any non-smooth op are skipped.  ``max_coords``
    limits the check to a seeded random subset of coordinates per leaf.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``floor="roundoff"`` the floor becomes ``4 * machine_eps * |f| / eps / 1e-4``,
    so a coordinate whose discrepancy sits inside the central difference's
    rounding noise scores below 1e-4; this is a diagnostic, not the default.
    """
    single = not isinstance(point, Mapping)
    base = {"x": point} if single else dict(point)
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
            for k, v in base.items()}

    def call(arrays, grad):
        ts = {k: Tensor(v, requires_grad=grad) for k, v in arrays.items()}
        out = f(ts["x"] if single else ts)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {out.shape}")
        return out, ts

    out, leaves = call(base, True)
    out.backward()
    if floor == "roundoff":
        floor = 4 * np.finfo(np.float64).eps * max(abs(float(out.data)), 1.0) / eps / 1e-4
    analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}

    def evaluate(arrays):
        with no_grad(), record_kinks() as log:
            try:
                val = float(call(arrays, False)[0].data)
            except NonFiniteError as exc:
                raise NonFiniteError(f"grad_check: f not finite at perturbed point ({exc})") from exc
        return val, tuple(log)

    _, base_kinks = evaluate(base)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in base.items():
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        flat_grad = analytic[name].reshape(-1)
        for idx in coords:
            def shifted(delta):
                moved = dict(base)
                a = arr.copy().reshape(-1)
                a[idx] += delta
                moved[name] = a.reshape(arr.shape)
                return moved

            if kink_margin and base_kinks:
                if (evaluate(shifted(kink_margin * eps))[1] != base_kinks
                        or evaluate(shifted(-kink_margin * eps))[1] != base_kinks):
                    continue
            fp, _ = evaluate(shifted(eps))
            fm, _ = evaluate(shifted(-eps))
            numeric = (fp - fm) / (2.0 * eps)
            a = flat_grad[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
    return worst
