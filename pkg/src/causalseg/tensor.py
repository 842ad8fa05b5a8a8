"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

The engine is intentionally small and auditable: ops execute eagerly,
recording onto an explicit :class:`Tape` only while one is active, and
:func:`backward` replays the tape in reverse order. :func:`grad_check`
is the central-difference oracle used to verify every registered op.

Broadcasting is restricted to three forms: scalar-with-tensor,
per-channel vector (C,) against an NCHW map, and per-feature vector
(D,) against an (N, D) matrix. Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateVectorError",
    "as_tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "matmul",
    "conv2d",
    "upsample_nearest",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "l2_normalize",
    "instance_stats",
    "instance_affine",
    "grad_reverse",
    "backward",
    "grad_check",
]

LOG_FLOOR = 1e-12
EXP_CEIL = 700.0
NORM_EPS = 1e-8
SIGMA_FLOOR = 1e-6


class ShapeError(ValueError):
    """Shape or axis mismatch between operands."""


class DegenerateVectorError(ValueError):
    """l2_normalize input with near-zero norm."""


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("output", "inputs", "grad_fn", "tape", "index")

    def __init__(self, output, inputs, grad_fn, tape, index):
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.tape = tape
        self.index = index


class Tape:
    """Ordered record of operations; a context manager enabling recording.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation graph. Leaving the context
    releases the recording: backward() must be called inside it. The
    release breaks tensor<->node reference cycles so each step's
    intermediate buffers free by refcount, not by the cyclic GC.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        for node in self.nodes:
            node.output.node = None
            node.output = None
            node.inputs = ()
            node.grad_fn = None
        self.nodes.clear()
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float64 array with optional gradient tracking.

    A tensor with no tape attachment is immutable by convention and safe
    to share across threads for read-only inference.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")  # keeps 0-d shape, unlike ascontiguousarray
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never tracks gradients."""
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap op output; record a node only when a tape is active and useful."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        node = Node(out, tuple(inputs), grad_fn, tape, len(tape.nodes))
        tape.nodes.append(node)
        out.node = node
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _identity_unbroadcast(g: np.ndarray) -> np.ndarray:
    return g


def _resolve_broadcast(a: Tensor, b: Tensor):
    """Return (a_view, b_view, unbroadcast_a, unbroadcast_b) or raise.

    Views are numpy arrays already reshaped so that plain numpy
    broadcasting realizes exactly one of the declared forms.
    """
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a.data, b.data, _identity_unbroadcast, _identity_unbroadcast
    if b.size == 1:
        def unb_b(g, shape=sb):
            return np.sum(g).reshape(shape)
        return a.data, b.data.reshape(()), _identity_unbroadcast, unb_b
    if a.size == 1:
        def unb_a(g, shape=sa):
            return np.sum(g).reshape(shape)
        return a.data.reshape(()), b.data, unb_a, _identity_unbroadcast
    # per-channel vector against NCHW
    if a.ndim == 4 and sb == (sa[1],):
        def unb_b(g):
            return g.sum(axis=(0, 2, 3))
        return a.data, b.data.reshape(1, -1, 1, 1), _identity_unbroadcast, unb_b
    if b.ndim == 4 and sa == (sb[1],):
        def unb_a(g):
            return g.sum(axis=(0, 2, 3))
        return a.data.reshape(1, -1, 1, 1), b.data, unb_a, _identity_unbroadcast
    # per-feature vector against (N, D)
    if a.ndim == 2 and sb == (sa[1],):
        def unb_b(g):
            return g.sum(axis=0)
        return a.data, b.data.reshape(1, -1), _identity_unbroadcast, unb_b
    if b.ndim == 2 and sa == (sb[1],):
        def unb_a(g):
            return g.sum(axis=0)
        return a.data.reshape(1, -1), b.data, unb_a, _identity_unbroadcast
    raise ShapeError(
        f"non-broadcastable shapes {sa} and {sb}: only scalar, per-channel "
        f"(C,)-with-NCHW, and per-feature (D,)-with-(N,D) forms are allowed"
    )


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv, unb_a, unb_b = _resolve_broadcast(a, b)
    out = av + bv

    def grad_fn(g):
        ga = unb_a(g) if a.requires_grad else None
        gb = unb_b(g) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv, unb_a, unb_b = _resolve_broadcast(a, b)
    out = av - bv

    def grad_fn(g):
        ga = unb_a(g) if a.requires_grad else None
        gb = unb_b(-g) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv, unb_a, unb_b = _resolve_broadcast(a, b)
    out = av * bv

    def grad_fn(g):
        ga = unb_a(g * bv) if a.requires_grad else None
        gb = unb_b(g * av) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv, unb_a, unb_b = _resolve_broadcast(a, b)
    out = av / bv

    def grad_fn(g):
        ga = unb_a(g / bv) if a.requires_grad else None
        gb = unb_b(-g * av / (bv * bv)) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def neg(x) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        return (-g,)

    return _result(-x.data, (x,), grad_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def grad_fn(g):
        return (g * mask,)

    return _result(out, (x,), grad_fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # stable piecewise form, no overflow warnings
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), grad_fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(np.minimum(x.data, EXP_CEIL))

    def grad_fn(g):
        return (g * out,)

    return _result(out, (x,), grad_fn)


def log(x) -> Tensor:
    """Natural log with the argument clamped to >= LOG_FLOOR.

    Below the floor the function is constant, so its gradient there is
    exactly zero; this keeps BCE finite on saturated probabilities.
    """
    x = as_tensor(x)
    clamped = np.maximum(x.data, LOG_FLOOR)
    out = np.log(clamped)
    inside = x.data > LOG_FLOOR

    def grad_fn(g):
        return (np.where(inside, g / clamped, 0.0),)

    return _result(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: a has {a.shape[1]} columns "
            f"but b has {b.shape[0]} rows"
        )
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with a KCkhkw kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [K,C,kh,kw], got {kernel.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(
            f"conv2d channel mismatch on axis 1: input has {c} channels, "
            f"kernel expects {ck}"
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel ({kh}x{kw}) exceeds padded spatial dims ({hp}x{wp})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # window VIEW into xp; nothing im2col-sized is materialized or retained
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # [N,C,Ho,Wo,kh,kw]
    out = np.einsum("nchwij,kcij->nkhw", win, kernel.data, optimize=True)

    def grad_fn(g):
        gk = None
        if kernel.requires_grad:
            gk = np.einsum("nkhw,nchwij->kcij", g, win, optimize=True)
        gx = None
        if x.requires_grad:
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    # one (i,j) tap at a time keeps transients input-sized
                    gxp[:, :, i : i + stride * ho : stride,
                        j : j + stride * wo : stride] += np.einsum(
                        "nkhw,kc->nchw", g, kernel.data[:, :, i, j], optimize=True
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _result(out, (x, kernel), grad_fn)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbor spatial upsampling of an NCHW map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        blocks = g.reshape(n, c, h, factor, w, factor)
        return (blocks.sum(axis=(3, 5)),)

    return _result(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and normalizations


def _normalize_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"reduction axis {a} out of range for ndim {ndim}")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return tuple(sorted(norm))


def _reduce(x, axes, keepdims, mean: bool) -> Tensor:
    x = as_tensor(x)
    if axes is not None and not isinstance(axes, int) and len(tuple(axes)) == 0:
        return x  # reduction over no axes is the identity
    ax = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    fn = np.mean if mean else np.sum
    out = fn(x.data, axis=ax, keepdims=keepdims)
    shape = x.shape

    def grad_fn(g):
        gv = g
        if not keepdims:
            for a in ax:
                gv = np.expand_dims(gv, a)
        gv = np.broadcast_to(gv, shape)
        if mean:
            gv = gv / count
        return (gv,)

    return _result(out, (x,), grad_fn)


def reduce_sum(x, axes=None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axes, keepdims, mean=False)


def reduce_mean(x, axes=None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axes, keepdims, mean=True)


def softmax(x, axis: int = 1) -> Tensor:
    """Shift-stabilized softmax along one axis."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _result(p, (x,), grad_fn)


def l2_normalize(v, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale vectors along `axis` to unit Euclidean norm.

    Raises DegenerateVectorError when any vector's norm falls below eps,
    rather than silently emitting NaN gradients.
    """
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateVectorError(
            f"l2_normalize: vector norm below {eps:g} (min {norm.min():.3e})"
        )
    y = v.data / norm

    def grad_fn(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _result(y, (v,), grad_fn)


def instance_stats(x) -> tuple[Tensor, Tensor]:
    """Per-instance per-channel spatial mean and population std of NCHW.

    Results are detached constants (no gradient flows through them); the
    std is floored at SIGMA_FLOOR so downstream divisions stay defined.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_stats input must be [N,C,H,W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        raise ShapeError(f"instance_stats needs H*W >= 2, got {x.shape[2:]}")
    mu = x.data.mean(axis=(2, 3))
    var = ((x.data - mu[:, :, None, None]) ** 2).mean(axis=(2, 3))
    sigma = np.maximum(np.sqrt(var), SIGMA_FLOOR)
    return Tensor(mu), Tensor(sigma)


def instance_affine(x, scale, shift) -> Tensor:
    """out[n,c,h,w] = x[n,c,h,w] * scale[n,c] + shift[n,c].

    scale/shift are treated as constants; only x receives gradient.
    """
    x = as_tensor(x)
    s = as_tensor(scale).data
    b = as_tensor(shift).data
    if x.ndim != 4 or s.shape != x.shape[:2] or b.shape != x.shape[:2]:
        raise ShapeError(
            f"instance_affine: x {x.shape} needs scale/shift of shape "
            f"{x.shape[:2]}, got {s.shape} and {b.shape}"
        )
    sv = s[:, :, None, None]
    out = x.data * sv + b[:, :, None, None]

    def grad_fn(g):
        return (g * sv,)

    return _result(out, (x,), grad_fn)


def grad_reverse(x, lambda_grl: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lambda."""
    x = as_tensor(x)
    lam = float(lambda_grl)

    def grad_fn(g):
        return (-lam * g,)

    return _result(x.data.copy(), (x,), grad_fn)


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    Gradients accumulate (+=) across fan-out and across repeated calls;
    callers reset with zero_grad between steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None:
        return  # constant loss: nothing reachable
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for rec in reversed(node.tape.nodes[: node.index + 1]):
        out = rec.output
        if out.grad is None:
            continue
        grads = rec.grad_fn(out.grad)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    saved_rg, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape():
            y = f(x)
            if y.size != 1:
                raise ShapeError("grad_check target must be scalar-valued")
            backward(y)
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad = saved_rg
        x.grad = saved_grad

    numeric = np.zeros_like(x.data)
    flat_x = x.data.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fp = f(x).item()
        flat_x[i] = orig - eps
        fm = f(x).item()
        flat_x[i] = orig
        flat_n[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
