"""Dense tensors with reverse-mode differentiation, plus truncated SVD.

Everything downstream (attention, SSM, distillation losses) is built from the
small set of primitives here: matmul, elementwise arithmetic, softmax family,
RMS normalization, causal depthwise 1-d convolution, rotary rotation, and
shape surgery (slice / reshape / transpose / concat / repeat / gather).
Each primitive records its inputs and a vector-Jacobian closure so that
``backward`` can return exact gradients, which are in turn checked against
``finite_diff_grad`` in the test suite.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

__all__ = [
    "KernelError",
    "GraphError",
    "Tensor",
    "ParamStore",
    "SvdFactors",
    "no_grad",
    "tensor",
    "svd_truncated",
    "backward",
    "finite_diff_grad",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Finite additive mask for causal attention: large enough that exp underflows
# to exactly 0 after max subtraction, small enough to stay representable in
# float32 (so tensors never carry inf, per the kernel finiteness invariant).
NEG_MASK = -1e30


class KernelError(Exception):
    """A kernel produced or was handed non-finite / malformed data."""


class GraphError(KernelError):
    """The recorded computation graph cannot be differentiated as requested."""


class _GradState(threading.local):
    def __init__(self):
        self.enabled = True


_grad_state = _GradState()


def grad_enabled() -> bool:
    """Whether graph recording is active on the current thread."""
    return _grad_state.enabled


@contextmanager
def no_grad():
    """Disable graph recording on the current thread (inference fast path)."""
    prev = _grad_state.enabled
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise KernelError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """A float32/float64 ndarray plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # operator sugar; the heavy lifting lives in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a Tensor of the given float dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor(_check_finite(data, op))
    if _grad_state.enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", np.float64))
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", np.float64))
    b = _wrap(b, a.dtype)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, (a, b), vjp, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise KernelError("matmul requires operands with ndim >= 2")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp, "exp")


def tlog(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(out, (a,), vjp, "log")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp, "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def vjp(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (a,), vjp, "silu")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * s,)

    return _make(out, (a,), vjp, "softplus")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=False),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    xd = x.data
    d = xd.shape[-1]
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = xd * r * gain.data

    def vjp(g):
        gg = g * gain.data
        inner = (gg * xd).sum(axis=-1, keepdims=True)
        gx = r * gg - (r**3 / d) * xd * inner
        ggain = (g * xd * r).reshape(-1, d).sum(axis=0)
        return gx.astype(xd.dtype, copy=False), ggain.astype(gain.dtype, copy=False)

    return _make(out, (x, gain), vjp, "rms_norm")


def conv1d_depthwise(x: Tensor, w: Tensor) -> Tensor:
    """Causal depthwise temporal convolution.

    ``x`` has shape (..., t, channels), ``w`` has shape (channels, k).  Output
    position t mixes inputs t-k+1 .. t, with implicit zero left-padding, so a
    kernel whose last tap is 1 (and the rest 0) is the identity.
    """
    k = w.shape[1]
    xd, wd = x.data, w.data
    t = xd.shape[-2]
    pad = [(0, 0)] * (xd.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for j in range(k):
        out += wd[:, j] * xp[..., j : j + t, :]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for j in range(k):
            gxp[..., j : j + t, :] += wd[:, j] * g
            gw[:, j] = (g * xp[..., j : j + t, :]).reshape(-1, xd.shape[-1]).sum(axis=0)
        gx = gxp[..., k - 1 :, :]
        return gx, gw

    return _make(out, (x, w), vjp, "conv1d_depthwise")


def rope_rotate(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotate adjacent coordinate pairs of the last axis by position-dependent angles.

    ``x`` has shape (..., t, heads, d) with d even; pair i of a vector turns by
    angle pos * base**(-2i/d).  The rotation is an isometry, so per-token norms
    are preserved and the vjp is the inverse rotation.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise KernelError("rotary dimension must be even")
    pos = np.asarray(positions, dtype=x.dtype)
    inv_freq = base ** -(np.arange(0, d, 2, dtype=x.dtype) / d)
    ang = pos[:, None] * inv_freq[None, :]  # (t, d/2)
    cos = np.cos(ang)[:, None, :]  # broadcast over heads
    sin = np.sin(ang)[:, None, :]
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _make(out, (x,), vjp, "rope")


# ---------------------------------------------------------------------------
# shape surgery


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        ga = np.zeros(shape, dtype=dtype)
        ga[idx] += g
        return (ga,)

    return _make(np.ascontiguousarray(out), (a,), vjp, "getitem")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make(out, (a,), vjp, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp, "transpose")


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(out, parts, vjp, "concat")


def repeat(a: Tensor, times: int, axis: int) -> Tensor:
    """Repeat each slice along an axis ``times`` times (GQA head sharing)."""
    out = np.repeat(a.data, times, axis=axis)
    n = a.shape[axis]
    ax = axis % a.ndim

    def vjp(g):
        new_shape = g.shape[:ax] + (n, times) + g.shape[ax + 1 :]
        return (g.reshape(new_shape).sum(axis=ax + 1),)

    return _make(out, (a,), vjp, "repeat")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id array; scatter-add on backward."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise KernelError("embedding ids must be integers")
    out = table.data[ids]
    vshape = table.shape

    def vjp(g):
        gt = np.zeros(vshape, dtype=table.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, vshape[-1]))
        return (gt,)

    return _make(out, (table,), vjp, "embedding")


def take_last_axis(a: Tensor, ids: np.ndarray) -> Tensor:
    """Select one entry per row along the last axis (label gather)."""
    ids = np.asarray(ids)
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        ga = np.zeros(shape, dtype=dtype)
        lead = np.ix_(*[np.arange(n) for n in shape[:-1]])
        np.add.at(ga, lead + (ids,), g)
        return (ga,)

    return _make(out, (a,), vjp, "take_last_axis")


# ---------------------------------------------------------------------------
# parameters and reverse-mode driver


class ParamStore:
    """Named parameter registry: dotted path -> (Tensor, trainable flag)."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def add(self, path: str, t: Tensor, trainable: bool = True) -> Tensor:
        if path in self._entries:
            raise KernelError(f"duplicate parameter path {path!r}")
        t.requires_grad = bool(trainable)
        self._entries[path] = (t, bool(trainable))
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._entries[path][0]

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def paths(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor, bool]]:
        for path, (t, trainable) in self._entries.items():
            yield path, t, trainable

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        for path, (t, trainable) in self._entries.items():
            if trainable:
                yield path, t


def backward(loss: Tensor, params: ParamStore) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a recorded scalar loss.

    Returns one gradient array per trainable parameter; parameters that do not
    participate in the graph get zeros of the matching shape.
    """
    if loss.data.shape != ():
        raise GraphError("loss must be a scalar")

    # iterative topological order over the recorded graph
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(topo):
        if not node._parents:
            continue  # leaf: keep its accumulated grad for collection below
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            raise GraphError("graph node has parents but no recorded primitive")
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    out: dict[str, np.ndarray] = {}
    for path, t in params.trainable_items():
        g = grads.get(id(t))
        out[path] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype)
    return out


def finite_diff_grad(
    f: Callable[[ParamStore], float], params: ParamStore, eps: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time.

    The verification oracle for ``backward``: f is evaluated 2*n times with
    each coordinate perturbed by +/-eps while everything else stays fixed.
    """
    if eps <= 0:
        raise KernelError("eps must be positive")
    out: dict[str, np.ndarray] = {}
    for path, t in params.trainable_items():
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params)
            flat[i] = orig - eps
            lo = f(params)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise KernelError(f"objective non-finite while probing {path}[{i}]")
            grad[i] = (hi - lo) / (2.0 * eps)
        out[path] = grad.reshape(t.shape)
    return out


# ---------------------------------------------------------------------------
# truncated SVD


@dataclass
class SvdFactors:
    """Rank-r factorization A ~ U @ diag(S) @ V.T with a fixed sign convention."""

    U: Tensor
    S: Tensor
    V: Tensor

    def __post_init__(self):
        s = self.S.data
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise KernelError("singular values must be non-negative and non-increasing")

    def reconstruct(self) -> np.ndarray:
        return (self.U.data * self.S.data) @ self.V.data.T


def svd_truncated(a, r: int) -> SvdFactors:
    """Best rank-r approximation factors of a 2-d matrix (Frobenius-optimal).

    Deterministic: each U column is flipped, together with its V column, so
    that its first nonzero entry is non-negative.
    """
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    if ad.ndim != 2:
        raise KernelError("svd_truncated expects a 2-d matrix")
    _check_finite(ad, "svd_truncated")
    m, n = ad.shape
    if not 1 <= r <= min(m, n):
        raise KernelError(f"rank {r} out of range for {m}x{n} matrix")
    try:
        u, s, vt = np.linalg.svd(ad, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise KernelError(f"svd failed to converge: {exc}") from None
    u, s, v = u[:, :r], s[:r], vt[:r].T
    for j in range(r):
        col = u[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    return SvdFactors(U=Tensor(u), S=Tensor(s), V=Tensor(v))
