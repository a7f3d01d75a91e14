"""Dense tensors with a small reverse-mode autodiff engine.

Every differentiable op creates a node holding its inputs and a closure that
maps the output cotangent to input cotangents. Nodes carry a global creation
sequence number; since an op's output is always created after its inputs,
sorting reachable nodes by descending sequence number is a reverse
topological order, which makes gradient accumulation order deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AutodiffError, GeometryError, LabelError, ShapeError

_COMPUTE_DTYPES = (np.float32, np.float64)
_seq = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in _COMPUTE_DTYPES:
        arr = arr.astype(np.float64)
    if arr.dtype not in _COMPUTE_DTYPES:
        raise TypeError(f"compute dtype must be float32 or float64, got {arr.dtype}")
    return arr


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    Leaves created by the user are trainable only if ``requires_grad`` is set.
    After ``backward`` every trainable leaf reachable from the loss has its
    ``grad`` attribute filled; everything else keeps ``grad = None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_seq)
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf that ``loss`` depends on."""
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss is not on the tape: no trainable tensor contributed to it")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_same(a, b, "add")
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_same(a, b, "sub")
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_same(a, b, "mul")
    return Tensor._make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def elementwise(op: str, a, b) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tensor_sum(a: Tensor) -> Tensor:
    return Tensor._make(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.full(a.shape, g, a.dtype),)
    )


def mean(a: Tensor) -> Tensor:
    n = a.size
    return Tensor._make(
        np.asarray(a.data.sum() / n, dtype=a.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, a.dtype),),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) mean over spatial positions."""
    b, c, h, w = x.shape
    n = h * w
    return Tensor._make(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g / n)[:, :, None, None], x.shape).astype(x.dtype),),
    )


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return Tensor._make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b for x (B, in), w (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise GeometryError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise GeometryError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bw(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._make(out, parents, bw)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation (no kernel flip) via im2col + batched matmul."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise GeometryError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_g, k1, k2 = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise GeometryError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin // groups != cin_g:
        raise GeometryError(f"weight expects {cin_g * groups} input channels, input has {cin}")
    if padding < 0 or stride < 1:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_size(h, k1, stride, padding)
    wo = conv_output_size(wd, k2, stride, padding)
    if ho <= 0 or wo <= 0:
        raise GeometryError(f"non-positive output size {ho}x{wo} for input {h}x{wd}, kernel {k1}x{k2}")
    if b is not None and b.shape != (cout,):
        raise GeometryError(f"conv2d: bias {b.shape} does not fit {cout} output channels")

    cout_g = cout // groups
    kk = cin_g * k1 * k2
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k1, k2), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, C, Ho, Wo, k1, k2) -> (G, B*Ho*Wo, Cg*k1*k2)
    cols = (
        win.reshape(bsz, groups, cin_g, ho, wo, k1, k2)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(groups, bsz * ho * wo, kk)
    )
    wmat = w.data.reshape(groups, cout_g, kk)
    out = cols @ wmat.transpose(0, 2, 1)  # (G, N, Cout_g)
    out = out.reshape(groups, bsz, ho, wo, cout_g).transpose(1, 0, 4, 2, 3).reshape(bsz, cout, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    else:
        parents = (x, w)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.reshape(bsz, groups, cout_g, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, -1, cout_g)
        grad_w = (gmat.transpose(0, 2, 1) @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape(groups, bsz, ho, wo, cin_g, k1, k2)
        dcols = dcols.transpose(1, 0, 4, 2, 3, 5, 6).reshape(bsz, cin, ho, wo, k1, k2)
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(k1):
            for j in range(k2):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j]
        grad_x = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        grads = [np.ascontiguousarray(grad_x), grad_w]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._make(out, parents, bw)


# ---------------------------------------------------------------------------
# normalisation


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean_: np.ndarray | None = None,
    var: np.ndarray | None = None,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalisation over every axis except channels (axis 1).

    With ``mean_``/``var`` given the statistics are treated as constants
    (eval mode). Otherwise two-pass batch statistics are used and the
    gradient flows through them. Returns the output together with the
    statistics actually used.
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = [1] * x.data.ndim
    shape[1] = x.shape[1]
    dt = x.dtype.type
    batch_stats = mean_ is None
    if batch_stats:
        mean_ = x.data.mean(axis=axes)
        var = ((x.data - mean_.reshape(shape)) ** 2).mean(axis=axes)
    mean_ = np.asarray(mean_, dtype=x.dtype)
    var = np.asarray(var, dtype=x.dtype)
    std = np.sqrt(var + dt(eps))
    xhat = (x.data - mean_.reshape(shape)) / std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    n = x.size // x.shape[1]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if batch_stats:
            s1 = dxhat.sum(axis=axes).reshape(shape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
            dx = (n * dxhat - s1 - xhat * s2) / (n * std.reshape(shape))
        else:
            dx = dxhat / std.reshape(shape)
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), bw), mean_, var


# ---------------------------------------------------------------------------
# losses and softmax


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a (B, C) tensor."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    bsz, c = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(bsz)
    loss = (lse - shifted[rows, labels]).sum() / bsz

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / bsz),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def straight_through_binarize(scores: Tensor, threshold: float = 0.0) -> Tensor:
    """Indicator(scores > threshold) whose backward pass is the identity."""
    out = (scores.data > threshold).astype(scores.dtype)
    return Tensor._make(out, (scores,), lambda g: (g,))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise AutodiffError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def parameters_hash(tensors: Iterable[tuple[str, np.ndarray]]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes, in the given order."""
    import hashlib

    h = hashlib.sha256()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
