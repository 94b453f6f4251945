"""Small define-by-run reverse-mode autodiff over numpy arrays.

Only what the disentanglement and tracking losses need: elementwise math,
affine layers, reductions, differentiable bilinear sampling and Adam.
Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(FloatingPointError):
    """A forward op produced a NaN or infinity."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, reused graph)."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # one reduction: any inf or nan makes the sum non-finite
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NumericError(f"non-finite value produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    _check_finite(out, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _parents=parents, _backward=backward_fn)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def sin(a) -> Tensor:
    a = _wrap(a)
    return _make(np.sin(a.data), "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _wrap(a)
    return _make(np.cos(a.data), "cos", (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, "softplus", (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _wrap(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


# -- linear algebra, reductions, shape ---------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(out), "mean", (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, "concat", tuple(tensors), bw)


def slice_(a, idx) -> Tensor:
    a = _wrap(a)
    out = a.data[idx]

    basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), "slice", (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


# -- bilinear sampling -------------------------------------------------------

def _bilinear_setup(h: int, w: int, coords: np.ndarray):
    x = coords[:, 0]
    y = coords[:, 1]
    cx = np.clip(x, 0.0, w - 1.0)
    cy = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(cx).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(cy).astype(np.intp), h - 2)
    fx = cx - x0
    fy = cy - y0
    i00 = y0 * w + x0
    inside_x = (x >= 0.0) & (x <= w - 1.0)
    inside_y = (y >= 0.0) & (y <= h - 1.0)
    return i00, fx, fy, inside_x, inside_y


def grid_sample(image, coords) -> Tensor:
    """Bilinear sampling of ``image`` at ``coords`` with clamp-to-border padding.

    ``image`` is (H, W) or (H, W, C); ``coords`` is (N, 2) holding (x, y) in
    pixel units where x indexes columns.  Returns (N,) or (N, C).  Gradients
    flow to both the image values and the coordinates; the coordinate
    gradient is zero where a coordinate was clamped.
    """
    image, coords = _wrap(image), _wrap(coords)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coords must be (N, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise NumericError("non-finite sampling coordinates")
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise ValueError("image must be at least 2x2")
    chans = image.shape[2:]
    flat = image.data.reshape(h * w, *chans)
    i00, fx, fy, inside_x, inside_y = _bilinear_setup(h, w, coords.data)
    v00 = flat[i00]
    v01 = flat[i00 + 1]
    v10 = flat[i00 + w]
    v11 = flat[i00 + w + 1]
    if chans:
        fxe, fye = fx[:, None], fy[:, None]
    else:
        fxe, fye = fx, fy
    top = v00 + fxe * (v01 - v00)
    bot = v10 + fxe * (v11 - v10)
    out = top + fye * (bot - top)

    def bw(g):
        g_img = None
        if image.requires_grad:
            n = h * w
            w00 = (1 - fxe) * (1 - fye) * g
            w01 = fxe * (1 - fye) * g
            w10 = (1 - fxe) * fye * g
            w11 = fxe * fye * g
            idx = np.concatenate([i00, i00 + 1, i00 + w, i00 + w + 1])
            vals = np.concatenate([w00, w01, w10, w11])
            if chans:
                vals = vals.reshape(len(idx), -1)
                g_flat = np.stack([np.bincount(idx, weights=vals[:, c], minlength=n)
                                   for c in range(vals.shape[1])], axis=1)
            else:
                g_flat = np.bincount(idx, weights=vals, minlength=n)
            g_img = g_flat.reshape(image.shape)
        g_crd = None
        if coords.requires_grad:
            dx = (1 - fye) * (v01 - v00) + fye * (v11 - v10)
            dy = bot - top
            gx = g * dx
            gy = g * dy
            if chans:
                gx = gx.sum(axis=1)
                gy = gy.sum(axis=1)
            g_crd = np.stack([gx * inside_x, gy * inside_y], axis=1)
        return g_img, g_crd

    return _make(out, "grid_sample", (image, coords), bw)


# -- backward ----------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into every leaf's ``.grad``.

    Leaf gradients accumulate across calls (call ``zero_grad`` between
    steps).  A graph can be traversed once; a second call raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._backward = None
        node._parents = ()
    loss._consumed = True


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over groups of leaf tensors, one learning rate per group."""

    def __init__(self, groups: list[tuple[list[Tensor], float]], **kwargs):
        self.groups = [(list(ps), AdamState(lr=lr, **kwargs)) for ps, lr in groups]

    def zero_grad(self) -> None:
        for ps, _ in self.groups:
            for p in ps:
                p.grad = None

    def step(self) -> None:
        for ps, state in self.groups:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in ps]
            adam_step([p.data for p in ps], grads, state)
