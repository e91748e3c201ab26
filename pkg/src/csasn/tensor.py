"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation records its parents and an explicit
vector-Jacobian product.  ``Tensor.backward`` walks the tape once in reverse
topological order.  numpy provides storage and the dense kernels; the
differentiation rules all live here.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float64
_grad_enabled = True


def set_precision(name: str) -> None:
    """Select the global float width ("f32" or "f64") for new tensors."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


def get_precision() -> str:
    return "f32" if _dtype is np.float32 else "f64"


@contextlib.contextmanager
def precision(name: str):
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An immutable array value plus its place on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self.name = name

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
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

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
        return swapaxes(self, -1, -2)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op with the given parents and VJP.

    ``vjp(g)`` receives the upstream gradient and returns one gradient (or
    None) per parent, in order.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return make_op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    return make_op(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    x = a.data
    t = np.tanh(np.logaddexp(0.0, x))
    return make_op(x * t, (a,), lambda g: (g * (t + x * (1.0 - t * t) * _sigmoid(x)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return make_op(out, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# shape ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return make_op(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return make_op(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return make_op(a.data[index], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


# reductions -----------------------------------------------------------------

def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return make_op(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims).copy(),),
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / out.size
    return make_op(
        out, (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims) / count,),
    )


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; ties share the gradient equally."""
    out = a.data.max(axis=axis, keepdims=True)
    hit = a.data == out
    share = hit / hit.sum(axis=axis, keepdims=True)
    value = out if keepdims else np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * share,)

    return make_op(value, (a,), vjp)


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of x[B,C,H,W] with w[O,C,kh,kw], zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c2}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns laid out [n, c*kh*kw, ho*wo] so the product lands directly in NCHW
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g3 = g.reshape(n, o, ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + wd]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_op(np.ascontiguousarray(out), parents, vjp)


# normalisation and probability ---------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def _normalize_vjp(g_hat, xhat, inv_std, axes, count):
    # gradient of xhat = (x - mean) / sqrt(var + eps) with biased variance
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv_std * (g_hat - s1 / count - xhat * s2 / count)


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    normed = make_op(
        xhat, (x,),
        lambda g: (_normalize_vjp(g, xhat, inv_std, -1, x.shape[-1]),),
    )
    if gain is not None:
        normed = normed * gain
    if bias is not None:
        normed = normed + bias
    return normed


class RunningStats:
    """Per-channel running mean/variance buffers for batch normalisation."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * batch_mean
        self.var = (1 - m) * self.var + m * batch_var_unbiased


def batch_norm(x: Tensor, stats: RunningStats, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               training: bool = True, eps: float = 1e-5) -> Tensor:
    """Normalise over every axis except 1 (channels).

    Training mode uses batch statistics and updates ``stats``; evaluation mode
    uses the running statistics.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    view = [1] * x.ndim
    view[1] = x.shape[1]
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2 (degenerate batch)")
        count = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        stats.update(mu.reshape(-1), var.reshape(-1) * count / max(count - 1, 1))
        normed = make_op(xhat, (x,), lambda g: (_normalize_vjp(g, xhat, inv_std, axes, count),))
    else:
        mu = stats.mean.reshape(view).astype(x.data.dtype)
        inv_std = (1.0 / np.sqrt(stats.var + eps)).reshape(view).astype(x.data.dtype)
        normed = make_op((x.data - mu) * inv_std, (x,), lambda g: (g * inv_std,))
    if gain is not None:
        normed = normed * gain.reshape(view)
    if bias is not None:
        normed = normed + bias.reshape(view)
    return normed


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) so evaluation is the identity."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.data.dtype)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


# spectra -------------------------------------------------------------------

def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by Jacobi rotations.

    Each sweep visits every (p, q) pair once in round-robin tournament order;
    the n/2 pairs of one round are disjoint, so their rotations commute and
    are applied together as a single orthogonal matrix.
    Returns (eigenvalues ascending, eigenvectors as columns).
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0 or n == 1:
        return np.diag(a).copy(), v
    a = 0.5 * (a + a.T)
    m = n + n % 2
    players = list(range(m))
    # full-matrix rotation products leave O(n eps) roundoff off the diagonal
    threshold = max(tol, 4 * n * np.finfo(np.float64).eps) * scale
    previous = np.inf
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= threshold or (off < 1e-10 * scale and off > 0.5 * previous):
            break
        previous = off
        for _round in range(m - 1):
            half = m // 2
            pairs = [(min(x, y), max(x, y)) for x, y in zip(players[:half], players[-1:half - 1:-1])
                     if max(x, y) < n]
            players = [players[0], players[-1]] + players[1:-1]
            p = np.array([pq[0] for pq in pairs])
            q = np.array([pq[1] for pq in pairs])
            apq = a[p, q]
            live = apq != 0.0
            if not live.any():
                continue
            p, q, apq = p[live], q[live], apq[live]
            diff = a[q, q] - a[p, p]
            tiny = np.abs(2.0 * apq) < np.abs(diff) * 1e-150
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                theta = np.where(tiny, 1.0, diff / (2.0 * apq))
                t = np.where(tiny, apq / np.where(tiny, diff, 1.0),
                             1.0 / (theta + np.copysign(np.sqrt(theta * theta + 1.0), theta)))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(n)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a[p, q] = a[q, p] = 0.0
            v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def gram_spectrum(f: np.ndarray):
    """Eigen-pairs of the smaller Gram matrix of ``f``.

    Returns (eigenvalues ascending, eigenvectors, side) where side is "rows"
    when the Gram matrix is f f^T and "cols" when it is f^T f.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] <= f.shape[1]:
        w, v = jacobi_eigh(f @ f.T)
        side = "rows"
    else:
        w, v = jacobi_eigh(f.T @ f)
        side = "cols"
    return np.clip(w, 0.0, None), v, side


def spectral_bottom_k(f, k: int) -> np.ndarray:
    """The ``k`` smallest singular values of a 2D matrix, ascending."""
    data = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"spectral_bottom_k needs a matrix, got shape {data.shape}")
    if not 1 <= k <= min(data.shape):
        raise ValueError(f"k={k} outside [1, min(B, D)={min(data.shape)}]")
    w, _, _ = gram_spectrum(data)
    return np.sqrt(w[:k])


# verification ----------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-4,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated for every probe, so anything random inside it must
    be seeded identically on every call.  With ``max_coords`` only that many
    randomly chosen coordinates per parameter are probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                original = flat[i]
                flat[i] = original + h
                up = f().item()
                flat[i] = original - h
                down = f().item()
                flat[i] = original
                numeric = (up - down) / (2 * h)
                exact = a.reshape(-1)[i]
                denom = max(abs(numeric), abs(exact), floor)
                worst = max(worst, abs(numeric - exact) / denom)
    return worst
