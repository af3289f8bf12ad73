"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations the generator, scorer and distiller need are
provided. Every tensor is immutable once built; gradients are returned from
:func:`backward` as a mapping keyed by tensor identity instead of being stored
on the tensors themselves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEBUG = False


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the dimension."""


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = "",
                 _owned: bool = False):
        arr = data if _owned else np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op or 'leaf'!r})"

    # arithmetic -------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not data.flags.owndata:
        data = data.copy()
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op, _owned=True)
    return Tensor(data, op=op, _owned=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tabs(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data >= 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    # d/dx softplus = sigmoid, written to avoid overflow for large |x|
    sig = np.exp(a.data - out)
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


# reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul: inner dimension {a.shape[-1]} vs {b.shape[0]} (shapes {a.shape} @ {b.shape})")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias, with weight stored [out, in]."""
    y = matmul(x, transpose(weight))
    return y if bias is None else y + bias


# convolution --------------------------------------------------------------

def _check_conv(x: np.ndarray, w: np.ndarray):
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [C_out, C_in, k, k], got {w.shape}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd and square, got {w.shape[2]}x{w.shape[3]}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C_in, H, W] or [B, C_in, H, W], got {x.shape}")
    if x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d: C_in mismatch, input has {x.shape[-3]} channels, weight expects {w.shape[1]}")


def _im2col(xd: np.ndarray, k: int, pad: int, stride: int):
    """Patches as a [C*k*k, B*Ho*Wo] matrix (rows ordered c, i, j)."""
    B, C, H, W = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = np.empty((C, k, k, B, Ho, Wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * Ho * Wo), xp.shape, Ho, Wo


def _conv_shift_sum(xd: np.ndarray, wd: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 conv as one GEMM over the padded input plus k*k shifted adds."""
    B, C, H, W = xd.shape
    O, k = wd.shape[0], wd.shape[2]
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - k + 1, Wp - k + 1
    xp = np.zeros((C, B, Hp, Wp))
    xp[:, :, pad:pad + H, pad:pad + W] = xd.transpose(1, 0, 2, 3)
    Y = (wd.transpose(2, 3, 0, 1).reshape(k * k * O, C) @ xp.reshape(C, -1)).reshape(k, k, O, B, Hp, Wp)
    out = np.zeros((O, B, Ho, Wo))
    for i in range(k):
        for j in range(k):
            out += Y[i, j, :, :, i:i + Ho, j:j + Wo]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_raw(xd: np.ndarray, wd: np.ndarray, pad: int, stride: int = 1) -> np.ndarray:
    O, C, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if stride == 1 and k > 1 and O <= C:
        return _conv_shift_sum(xd, wd, pad)
    B = xd.shape[0]
    colmat, _, Ho, Wo = _im2col(xd, k, pad, stride)
    out = (wd.reshape(O, -1) @ colmat).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out)


def conv2d(x, weight, pad: int | None = None, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is [C_in, H, W] or batched [B, C_in, H, W]; ``weight`` is
    [C_out, C_in, k, k]. ``pad`` defaults to (k-1)//2, i.e. same-size output
    when ``stride == 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv(x.data, weight.data)
    k = weight.shape[2]
    if pad is None:
        pad = (k - 1) // 2
    if pad != (k - 1) // 2:
        raise ShapeError(f"conv2d: pad must be (k-1)/2 = {(k - 1) // 2}, got {pad}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    B, C, H, W = xd.shape
    O = weight.shape[0]
    out = _conv_raw(xd, weight.data, pad, stride)
    Ho, Wo = out.shape[2], out.shape[3]
    out = out[0] if unbatched else out

    def bw(g):
        g4 = g[None] if unbatched else g
        gw = gx = None
        gmat = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        if weight.requires_grad:
            colmat, _, _, _ = _im2col(xd, k, pad, stride)
            gw = (gmat @ colmat.T).reshape(weight.shape)
        if x.requires_grad:
            if stride == 1:
                # correlation of the output gradient with the flipped, transposed kernel
                wt = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _conv_raw(g4, wt, k - 1 - pad)
            else:
                gcols = (weight.data.reshape(O, -1).T @ gmat).reshape(C, k, k, B, Ho, Wo)
                gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            gx = gx[0] if unbatched else gx
        return gx, gw

    return _make(out, (x, weight), bw, "conv2d")


def modulated_conv2d(x, weight, style, demodulate: bool = True, eps: float = 1e-8) -> Tensor:
    """StyleGAN2 modulated convolution.

    Equivalent to convolving with ``weight * style`` (broadcast over C_in) and,
    when ``demodulate``, rescaling each output filter to unit L2 norm. The
    modulation is applied to the input activations instead of the weight so a
    batch of styles can share one convolution.
    """
    x, weight, style = as_tensor(x), as_tensor(weight), as_tensor(style)
    c_in = weight.shape[1]
    if style.shape[-1] != c_in:
        raise ShapeError(f"modulated_conv2d: style length {style.shape[-1]} != C_in {c_in}")
    if not np.all(np.isfinite(style.data)):
        raise ValueError("modulated_conv2d: style must be finite")
    s = reshape(style, style.shape + (1, 1))
    y = conv2d(x * s, weight)
    if demodulate:
        wsq = tsum(square(weight), axis=(2, 3))  # [C_out, C_in]
        dcoef = power(matmul(square(style), transpose(wsq)) + eps, -0.5)
        y = y * reshape(dcoef, dcoef.shape + (1, 1))
    return y


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (x,), bw, "upsample2x")


# backward -----------------------------------------------------------------

class AutodiffGraph:
    """Recorded operations reachable from a loss, in topological order."""

    def __init__(self, loss: Tensor):
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
        self.nodes = order
        self.loss = loss

    def __len__(self) -> int:
        return len(self.nodes)


class Gradients(dict):
    """Mapping from tensor to gradient array, keyed by identity."""

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(t))[1]

    def get(self, t: Tensor, default=None):
        v = dict.get(self, id(t))
        return default if v is None else v[1]

    def __contains__(self, t) -> bool:
        return dict.__contains__(self, id(t))


def backward(loss: Tensor, graph: AutodiffGraph | None = None) -> Gradients:
    """Reverse-mode gradients of a scalar ``loss``.

    Every requires_grad tensor reachable from ``loss`` receives a gradient
    of its own shape. Tensors that do not influence the loss are absent.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if graph is None:
        graph = AutodiffGraph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    out = Gradients()
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        out[id(node)] = (node, g)
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = np.asarray(pg, dtype=np.float64)
    return out


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Error per coordinate is ``|auto - fd| / max(1e-12, |fd|)``; when both
    are zero it is 0.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    loss = fn(x)
    auto = backward(loss).get(x, np.zeros_like(x0))
    fd = np.zeros_like(x0)
    flat = fd.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        with no_grad():
            fp = fn(Tensor(xp.reshape(x0.shape))).item()
            fm = fn(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * step)
    err = np.abs(auto - fd) / np.maximum(1e-12, np.abs(fd))
    err[(auto == 0) & (fd == 0)] = 0.0
    return float(err.max()) if err.size else 0.0
