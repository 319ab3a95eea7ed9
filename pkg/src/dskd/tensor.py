"""Dense NHWC tensors with tape-based reverse-mode differentiation.

Every value produced by an op records its parents and a closure that pushes
the output gradient back into them.  ``backward`` walks the tape in reverse
topological order, so a tensor consumed by several ops accumulates the sum of
their contributions.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's rule."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap non-tensor operands in the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{name}: non-finite value in forward output")


def _make(name: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(name, data)
    out = Tensor(data, dtype=data.dtype)
    out.op = name
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = _unbroadcast(pg, parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # interior nodes keep no grad; leaves were filled by _accumulate


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.exp(-np.logaddexp(0, -x)).astype(x.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NumericError("log: non-positive input")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# reductions and reshapes ------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _make("mean", out.astype(a.dtype), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def global_avg_pool(a: Tensor) -> Tensor:
    """B×H×W×D -> B×D (or H×W×D -> D)."""
    if a.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected rank 3 or 4, got shape {a.shape}")
    axes = (0, 1) if a.ndim == 3 else (1, 2)
    return mean(a, axis=axes)


# linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``a`` (any leading dims) with a 2-D ``w``."""
    a, w = _pair(a, w)
    if w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {w.shape}")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, w.shape[0])
    wd = w.data
    out = (a2 @ wd).reshape(*lead, w.shape[1])

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        return (g2 @ wd.T).reshape(a.shape), a2.T @ g2

    return _make("matmul", out, (a, w), bw)


def softmax(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("softmax", p, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


# convolution ------------------------------------------------------------------

KERNEL = 3


def _conv_out_size(n: int, stride: int) -> int:
    return (n + 2 - KERNEL) // stride + 1


def _patches(x: np.ndarray, stride: int) -> np.ndarray:
    """B×H×W×C -> B×Ho×Wo×C×3×3 view of zero-padded 3×3 windows."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    # w: 3×3×Cin×Cout
    return np.tensordot(_patches(x, stride), w, axes=([3, 4, 5], [2, 0, 1]))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int) -> np.ndarray:
    b, ho, wo, _ = g.shape
    h, wd = in_hw
    dp = np.tensordot(g, w, axes=([3], [3]))  # B×Ho×Wo×3×3×Cin
    dx = np.zeros((b, h + 2, wd + 2, w.shape[2]), dtype=np.result_type(g, w))
    for i in range(KERNEL):
        for j in range(KERNEL):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dp[:, :, :, i, j, :]
    return dx[:, 1:-1, 1:-1, :]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, stride: int) -> np.ndarray:
    dw = np.tensordot(_patches(x, stride), g, axes=([0, 1, 2], [0, 1, 2]))  # Cin×3×3×Cout
    return dw.transpose(1, 2, 0, 3)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3×3 convolution, zero padding 1, NHWC input, weight 3×3×Cin×Cout."""
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.shape[:2] != (KERNEL, KERNEL) or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"conv2d: empty spatial extent in {x.shape}")
    xd, wd = x.data, w.data
    out = _conv_fwd(xd, wd, stride)

    def bw(g):
        return _conv_input_grad(g, wd, xd.shape[1:3], stride), _conv_weight_grad(xd, g, stride)

    return _make("conv2d", out, (x, w), bw)


def conv_transpose2d(x: Tensor, w: Tensor) -> Tensor:
    """3×3 transposed convolution with stride 2 doubling H and W.

    ``w`` has shape 3×3×Cin×Cout.  The op is the exact adjoint of a stride-2
    ``conv2d`` mapping 2H×2W×Cout to H×W×Cin with weight ``w`` transposed in
    its channel axes.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (KERNEL, KERNEL) or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    k = wd.transpose(0, 1, 3, 2)  # adjoint conv kernel: Cout -> Cin
    out_hw = (2 * xd.shape[1], 2 * xd.shape[2])
    out = _conv_input_grad(xd, k, out_hw, 2)

    def bw(g):
        dx = _conv_fwd(g, k, 2)
        dk = _conv_weight_grad(g, xd, 2)
        return dx, dk.transpose(0, 1, 3, 2)

    return _make("conv_transpose2d", out, (x, w), bw)


# normalization ----------------------------------------------------------------

NORM_EPS = 1e-5


def standardize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardization over the spatial axes of B×H×W×D.

    Scale and shift are applied by the caller with ``mul``/``add``.
    """
    if x.ndim != 4:
        raise ShapeError(f"standardize: expected B×H×W×D, got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=(1, 2), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gx = (g * xhat).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("standardize", xhat.astype(xd.dtype), (x,), bw)


# gradient oracle --------------------------------------------------------------


def numerical_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function, evaluated in float64."""
    x = np.array(point, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(Tensor(x, dtype=np.float64)).data)
            flat[i] = orig - step
            fm = float(fn(Tensor(x, dtype=np.float64)).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite function value at coordinate {i}")
            gflat[i] = (fp - fm) / (2.0 * step)
    return out


def analytic_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True, dtype=np.float64)
    loss = fn(x)
    backward(loss)
    return np.zeros_like(x.data) if x.grad is None else x.grad


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-4,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``grad_fn`` replaces the tape gradient, which is how closed-form
    gradients (and planted faults) are checked.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    point = np.asarray(point, dtype=np.float64)
    num = numerical_grad(fn, point, step)
    ana = np.asarray(grad_fn(point) if grad_fn is not None else analytic_grad(fn, point), dtype=np.float64)
    return float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(num))))


def parameters_of(modules: Iterable) -> list[Tensor]:
    out: list[Tensor] = []
    for m in modules:
        out.extend(m.params.values())
    return out
