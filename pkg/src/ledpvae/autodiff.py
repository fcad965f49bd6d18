"""Reverse-mode automatic differentiation over n-dimensional numpy arrays.

Every differentiable quantity in the package (object fields, latents,
network weights) is a :class:`Tensor`.  Operations record a closure that
maps the output cotangent to input cotangents; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order, visiting each node
exactly once, so accumulation order is fixed and results are reproducible
bit for bit.

Complex convention: for a real loss ``L`` and a complex tensor
``z = x + iy`` the stored gradient is ``dL/dx + i dL/dy`` (twice the
Wirtinger derivative with respect to ``conj(z)``).  The update
``z <- z - lr * grad`` therefore descends ``L``, and real parameters that
feed complex ops receive the real part of their cotangent.

FFTs use the unitary normalisation, so the adjoint of ``fft2`` is
``ifft2`` and Parseval holds with equality.
"""

from __future__ import annotations

from collections import Counter
from functools import lru_cache
from numbers import Number

import numpy as np

from .errors import NumericError, ShapeError

_NONFINITE: Counter = Counter()


def nonfinite_events() -> dict:
    """Counts of forward ops (by kind) that produced inf/nan since the last reset."""
    return dict(_NONFINITE)


def reset_nonfinite() -> None:
    _NONFINITE.clear()


def _as_array(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype.kind in "biu":
        a = a.astype(np.float64)
    return a


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf" if requires_grad else "const"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate gradients into every leaf reachable from this tensor."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                pg = _fit_grad(pg, parent.data)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _fit_grad(g, like: np.ndarray) -> np.ndarray:
    g = _unbroadcast(np.asarray(g), like.shape)
    if like.dtype.kind != "c" and g.dtype.kind == "c":
        g = g.real
    return g.astype(like.dtype, copy=False)


def _val(x):
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Number):
        return x
    return _as_array(x)


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _conj(v):
    return np.conj(v) if np.iscomplexobj(v) else v


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    if any(_needs(p) for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _result(av + bv, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _result(av - bv, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    return _result(-_val(a), (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)

    def backward(g):
        return (g * _conj(bv) if _needs(a) else None,
                g * _conj(av) if _needs(b) else None)

    return _result(av * bv, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    if not np.all(np.isfinite(out)):
        _NONFINITE["div"] += 1

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / _conj(bv) if _needs(a) else None
            gb = -g * _conj(out / bv) if _needs(b) else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def power(a, p: float) -> Tensor:
    av = _val(a)
    out = av ** p
    return _result(out, (a,), lambda g: (g * _conj(p * av ** (p - 1)),), "pow")


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _result(out, (a,), lambda g: (g * _conj(out),), "exp")


def expm1(a) -> Tensor:
    """exp(a) - 1, accurate near zero (real inputs)."""
    av = _val(a)
    out = np.expm1(av)
    return _result(out, (a,), lambda g: (g * np.exp(av),), "expm1")


def log(a) -> Tensor:
    av = _val(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    if not np.all(np.isfinite(out)):
        _NONFINITE["log"] += 1
    return _result(out, (a,), lambda g: (g / _conj(av),), "log")


def sqrt(a) -> Tensor:
    out = np.sqrt(_val(a))
    return _result(out, (a,), lambda g: (g * 0.5 / _conj(out),), "sqrt")


def abs2(a) -> Tensor:
    """Squared modulus ``|a|^2``; real output for complex input."""
    av = _val(a)
    out = av.real ** 2 + av.imag ** 2 if np.iscomplexobj(av) else av * av
    return _result(out, (a,), lambda g: (2 * g * av,), "abs2")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    av = _val(a)
    pos = av > 0
    out = np.where(pos, av, slope * av)
    return _result(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def clampmin(a, eps: float) -> Tensor:
    av = _val(a)
    keep = av > eps
    out = np.where(keep, av, eps).astype(av.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * keep,), "clampmin")


def clip(a, lo: float, hi: float) -> Tensor:
    av = _val(a)
    keep = (av >= lo) & (av <= hi)
    return _result(np.clip(av, lo, hi), (a,), lambda g: (g * keep,), "clip")


def real(a) -> Tensor:
    return _result(np.real(_val(a)), (a,), lambda g: (g,), "real")


def imag(a) -> Tensor:
    return _result(np.imag(_val(a)), (a,), lambda g: (1j * g,), "imag")


def conj(a) -> Tensor:
    return _result(np.conj(_val(a)), (a,), lambda g: (np.conj(g),), "conj")


def make_complex(re, im) -> Tensor:
    """``re + 1j*im`` from two real tensors."""
    rv, iv = _val(re), _val(im)
    out = rv + 1j * iv
    if np.asarray(rv).dtype == np.float32 and np.asarray(iv).dtype == np.float32:
        out = out.astype(np.complex64)
    return _result(out, (re, im), lambda g: (np.real(g), np.imag(g)), "complex")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "abs2": abs2,
    "leaky-relu": leaky_relu, "clampmin": clampmin,
}


def elementwise(kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch by name: binary kinds take ``b``; ``leaky-relu`` takes ``slope``,
    ``clampmin`` takes ``eps``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul", "div"):
        _check_broadcast(a, b)
        return fn(a, b)
    if kind == "leaky-relu":
        return fn(a, kw.get("slope", 0.01))
    if kind == "clampmin":
        return fn(a, kw["eps"])
    return fn(a)


def _check_broadcast(a, b) -> None:
    try:
        np.broadcast_shapes(np.shape(_val(a)), np.shape(_val(b)))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
    return tuple(sorted(ax % ndim for ax in axes))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    axes = _norm_axes(axis, av.ndim)
    out = av.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, av.shape),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    axes = _norm_axes(axis, av.ndim)
    count = int(np.prod([av.shape[i] for i in axes])) if axes else 1
    out = av.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, av.shape),)

    return _result(out, (a,), backward, "mean")


def reduce(a, kind: str, axes=None) -> Tensor:
    if kind == "sum":
        return sum_(a, axes)
    if kind == "mean":
        return mean(a, axes)
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _result(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    axes = tuple(range(av.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(av.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    av = _val(a)
    out = av[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        gx = np.zeros(av.shape, dtype=np.result_type(av.dtype, g.dtype))
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, (a,), backward, "getitem")


def concat(xs, axis: int = 0) -> Tensor:
    vals = [_val(x) for x in xs]
    ndim = vals[0].ndim
    (ax,) = _norm_axes(axis, ndim)
    out = np.concatenate(vals, axis=ax)
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tuple(xs), backward, "concat")


def stack(xs, axis: int = 0) -> Tensor:
    return concat([reshape(x, _val(x).shape[:axis] + (1,) + _val(x).shape[axis:])
                   if isinstance(x, Tensor) else np.expand_dims(_val(x), axis) for x in xs],
                  axis=axis)


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul needs operands with at least two dimensions")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ _conj(np.swapaxes(bv, -1, -2)) if _needs(a) else None
        gb = _conj(np.swapaxes(av, -1, -2)) @ g if _needs(b) else None
        return ga, gb

    return _result(av @ bv, (a, b), backward, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    av = _val(a)
    z = np.exp(av - av.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# Fourier ops


def _check_fft_shape(shape) -> None:
    if len(shape) < 2 or shape[-1] != shape[-2] or shape[-1] % 2:
        raise ShapeError(f"fft2 needs equal, even trailing dims; got {shape}")


def fft2(a, direction: str = "fwd") -> Tensor:
    """Unitary 2-D DFT over the last two axes (``direction`` is fwd or inv)."""
    av = _val(a)
    _check_fft_shape(av.shape)
    if direction == "fwd":
        fwd, adj = np.fft.fft2, np.fft.ifft2
    elif direction == "inv":
        fwd, adj = np.fft.ifft2, np.fft.fft2
    else:
        raise ValueError(f"direction must be 'fwd' or 'inv', got {direction!r}")
    out = fwd(av, norm="ortho")
    if av.dtype in (np.float32, np.complex64):
        out = out.astype(np.complex64)
    return _result(out, (a,), lambda g: (adj(g, norm="ortho"),), f"fft2-{direction}")


def ifft2(a) -> Tensor:
    return fft2(a, "inv")


@lru_cache(maxsize=64)
def _roll_indices(n: int, shifts: tuple) -> tuple:
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    fwd = np.empty((len(shifts), n * n), dtype=np.intp)
    back = np.empty_like(fwd)
    for k, (dr, dc) in enumerate(shifts):
        fwd[k] = (((rows - dr) % n) * n + (cols - dc) % n).ravel()
        back[k] = (((rows + dr) % n) * n + (cols + dc) % n).ravel()
    return fwd, back


def roll_stack(a, shifts) -> Tensor:
    """Stack of cyclic shifts: ``out[..., k, :, :] = roll(a, shifts[k], axes=(-2, -1))``.

    ``a`` has shape (..., n, n); the result gains an axis of length
    ``len(shifts)`` before the last two.  The backward pass sums the
    inversely shifted cotangents in shift order.
    """
    av = _val(a)
    n = av.shape[-1]
    if av.shape[-2] != n:
        raise ShapeError("roll_stack needs square trailing dims")
    shifts = tuple((int(r), int(c)) for r, c in shifts)
    fwd, back = _roll_indices(n, shifts)
    lead = av.shape[:-2]
    out = av.reshape(lead + (n * n,))[..., fwd].reshape(lead + (len(shifts), n, n))

    def backward(g):
        gf = g.reshape(lead + (len(shifts), n * n))
        picked = np.take_along_axis(gf, np.broadcast_to(back, gf.shape), axis=-1)
        return (picked.sum(axis=-2).reshape(av.shape),)

    return _result(out, (a,), backward, "roll_stack")


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(xv: np.ndarray, kh: int) -> np.ndarray:
    """(n, c, h, w) -> (n*h*w, kh*kh*c) patches, channel index fastest."""
    n, c, h, w = xv.shape
    if kh == 1:
        return xv.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    p = kh // 2
    padded = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=xv.dtype)
    padded[:, p:p + h, p:p + w, :] = xv.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, kh, kh, c), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kh):
            cols[:, :, :, i, j, :] = padded[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, kh * kh * c)


def conv2d(x, k, bias=None) -> Tensor:
    """Same-size cross-correlation, stride 1, zero padding ``kh // 2``.

    x: (n, c, h, w); k: (c_out, c, kh, kw) with odd square kernel; bias: (c_out,).
    The input gradient is the correlation of the output gradient with the
    spatially flipped, channel-transposed kernel.
    """
    xv, kv = _val(x), _val(k)
    if xv.ndim != 4 or kv.ndim != 4:
        raise ShapeError("conv2d expects x as (n,c,h,w) and k as (c_out,c,kh,kw)")
    n, c, h, w = xv.shape
    co, ci, kh, kw = kv.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d kernel must be square with odd size")
    cols = _im2col(xv, kh)
    wmat = kv.transpose(0, 2, 3, 1).reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + _val(bias)
    out = out.reshape(n, h, w, co).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, co)
        gk = None
        if _needs(k):
            gk = (g2.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if _needs(bias) else None
        gx = None
        if _needs(x):
            if kh == 1:
                gx = (g2 @ wmat).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                flipped = kv[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
                gx = (_im2col(g, kh) @ flipped.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _result(out, (x, k, bias), backward, "conv2d")


def avg_down(x) -> Tensor:
    """2x2 mean pooling over the last two axes."""
    xv = _val(x)
    h, w = xv.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_down needs even spatial dims, got {(h, w)}")
    out = (xv[..., 0::2, 0::2] + xv[..., 1::2, 0::2]
           + xv[..., 0::2, 1::2] + xv[..., 1::2, 1::2]) / 4

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4,)

    return _result(out, (x,), backward, "avg_down")


def nearest_up(x) -> Tensor:
    """2x nearest-neighbour upsampling; its adjoint is 4 * avg_down."""
    xv = _val(x)
    h, w = xv.shape[-2:]
    lead = xv.shape[:-2]
    out = np.repeat(np.repeat(xv, 2, axis=-2), 2, axis=-1)

    def backward(g):
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return _result(out, (x,), backward, "nearest_up")


def pool2(x, mode: str) -> Tensor:
    if mode == "avg-down":
        return avg_down(x)
    if mode == "nearest-up":
        return nearest_up(x)
    raise ValueError(f"unknown pool mode {mode!r}")


# ---------------------------------------------------------------------------
# gradient checking


def _central_difference(f, flat, i, orig, step, h, order):
    def at(k):
        flat[i] = orig + k * step
        return float(np.real(f().data))

    try:
        if order == 2:
            return (at(1) - at(-1)) / (2 * h)
        return (-at(2) + 8 * at(1) - 8 * at(-1) + at(-2)) / (12 * h)
    finally:
        flat[i] = orig


def grad_check(f, params, h: float = 1e-6, max_coords: int | None = None, rng=None,
               order: int = 2) -> float:
    """Max relative error between backward() and central differences.

    ``f`` is a zero-argument callable that rebuilds the scalar graph from
    ``params`` each time it is called.  Complex parameters are perturbed
    along their real and imaginary parts separately.  When ``max_coords``
    is given, that many coordinates per parameter are sampled with ``rng``.
    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``
    on losses whose magnitude makes two-point differences roundoff-bound.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    for p in params:
        if p.data.dtype not in (np.float64, np.complex128):
            raise ValueError("grad_check requires 64-bit parameters")
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError(f"grad_check: non-finite function value {out.data!r}")
    out.backward()
    rng = np.random.default_rng(0) if rng is None else rng

    worst = 0.0
    for pi, p in enumerate(params):
        ga = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(ga).all():
            raise NumericError(f"grad_check: non-finite analytic gradient in param {pi}")
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        units = (1.0, 1j) if p.is_complex else (1.0,)
        for i in coords:
            orig = flat[i]
            for unit in units:
                num = _central_difference(f, flat, i, orig, h * unit, h, order)
                ana = ga.flat[i].real if unit == 1.0 else ga.flat[i].imag
                if not (np.isfinite(num) and np.isfinite(ana)):
                    raise NumericError(
                        f"grad_check: non-finite value at param {pi} coord {i}: "
                        f"analytic={ana!r} numeric={num!r}")
                worst = max(worst, abs(ana - num) / max(1.0, abs(num)))
    for p in params:
        p.grad = None
    return worst
