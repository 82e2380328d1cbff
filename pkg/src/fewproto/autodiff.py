"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap rank <= 2 float32/float64 numpy arrays. Every primitive that
sees a gradient-requiring input records backpointers plus a backward
closure; `backward()` then walks the reachable nodes once in reverse
creation order (creation order is a topological order because parents exist
before their children). Leaf gradients accumulate across backward calls
until reset; intermediate gradients are cleared at the start of each call.

Hot rowwise/elementwise math is delegated to `kernels` (numba or numpy
backend). Graph construction is single-threaded per graph; distinct graphs
are independent, and the grad-recording flag is thread-local.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import DimensionError, NumericError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Array node in the differentiation graph.

    `grad`, once populated, accumulates until `zero_grad()`; this is what
    the trainer's gradient accumulation over episodes relies on.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_seq", "name")

    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(Tensor._ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"


class Graph:
    """All nodes reachable from a root, sorted in reverse creation order.

    Reverse creation order is a reverse topological order, so one sweep
    propagates every gradient exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self, root: Tensor):
        seen = {id(root)}
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t.parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self.nodes = nodes


def backward(loss: Tensor) -> None:
    """Populate grads of all trainable tensors reachable from a scalar loss."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward() on a tensor that is not part of a graph")
    nodes = Graph(loss).nodes
    for n in nodes:
        if n.parents:
            n.grad = None  # intermediate grads are per-call; leaves accumulate
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for n in nodes:
        if n._backward is not None and n.grad is not None:
            n._backward()


def _node(data, op: str, parents) -> Tensor:
    t = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = op
        t.parents = tuple(parents)
    return t


def _acc(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ------------------------------------------------------------ primitives ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = _node(a.data @ b.data, "matmul", (a, b))
    if out.requires_grad:
        def bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, g @ b.data.T)
            if b.requires_grad:
                _acc(b, a.data.T @ g)
        out._backward = bw
    return out


def transpose(a: Tensor) -> Tensor:
    out = _node(a.data.T, "transpose", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, out.grad.T)
        out._backward = bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of a."""
    bias_mode = a.data.ndim == 2 and b.data.ndim == 1
    if bias_mode:
        if b.data.shape[0] != a.data.shape[1]:
            raise DimensionError(f"add: bias {b.data.shape} does not match rows of {a.data.shape}")
    elif a.data.shape != b.data.shape:
        raise DimensionError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = _node(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, g)
            if b.requires_grad:
                _acc(b, g.sum(axis=0) if bias_mode else g)
        out._backward = bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _node(a.data * c, "scale", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, out.grad * c)
        out._backward = bw
    return out


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant scalar/array (no gradient flows into the constant)."""
    c = np.asarray(c, dtype=a.data.dtype)
    out = _node(a.data + c, "add_const", (a,))
    if out.data.shape != a.data.shape:
        raise DimensionError(f"add_const: constant {c.shape} broadcasts {a.data.shape} up")
    if out.requires_grad:
        def bw():
            _acc(a, out.grad)
        out._backward = bw
    return out


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (masking, detached scaling)."""
    c = np.asarray(c, dtype=a.data.dtype)
    out = _node(a.data * c, "mul_const", (a,))
    if out.data.shape != a.data.shape:
        raise DimensionError(f"mul_const: constant {c.shape} broadcasts {a.data.shape} up")
    if out.requires_grad:
        def bw():
            _acc(a, out.grad * c)
        out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _node(y, "exp", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, out.grad * y)
        out._backward = bw
    return out


def log(a: Tensor) -> Tensor:
    out = _node(np.log(a.data), "log", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, out.grad / a.data)
        out._backward = bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    """Scalar division a / b."""
    if a.data.ndim != 0 or b.data.ndim != 0:
        raise DimensionError(f"div: scalars required, got {a.data.shape} and {b.data.shape}")
    out = _node(a.data / b.data, "div", (a, b))
    if out.requires_grad:
        def bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, g / b.data)
            if b.requires_grad:
                _acc(b, -g * a.data / (b.data * b.data))
        out._backward = bw
    return out


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row softmax with max-subtraction; rows sum to 1."""
    y = K.softmax_fwd(a.data if a.data.ndim == 2 else a.data[None, :])
    if a.data.ndim == 1:
        y = y[0]
    out = _node(y, "softmax_lastdim", (a,))
    if out.requires_grad:
        def bw():
            g = out.grad
            if y.ndim == 1:
                _acc(a, K.softmax_bwd(y[None, :], g[None, :])[0])
            else:
                _acc(a, K.softmax_bwd(y, g))
        out._backward = bw
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (population variance, eps-guarded), then affine."""
    if x.data.ndim != 2:
        raise DimensionError(f"layernorm: 2-D input required, got {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm: gain {gain.data.shape} / bias {bias.data.shape} do not match width {d}")
    y, mean, rstd = K.layernorm_fwd(x.data, gain.data, bias.data, float(eps))
    out = _node(y, "layernorm", (x, gain, bias))
    if out.requires_grad:
        def bw():
            gx, ggain, gbias = K.layernorm_bwd(x.data, gain.data, mean, rstd, out.grad)
            if x.requires_grad:
                _acc(x, gx)
            if gain.requires_grad:
                _acc(gain, ggain)
            if bias.requires_grad:
                _acc(bias, gbias)
        out._backward = bw
    return out


def gelu(a: Tensor) -> Tensor:
    out = _node(K.gelu_fwd(a.data), "gelu", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, K.gelu_bwd(a.data, out.grad))
        out._backward = bw
    return out


def mean_over_axis(a: Tensor, axis: int = 0) -> Tensor:
    n = a.data.shape[axis]
    out = _node(a.data.mean(axis=axis), "mean_over_axis", (a,))
    if out.requires_grad:
        def bw():
            g = np.expand_dims(out.grad, axis) / n
            _acc(a, np.broadcast_to(g, a.data.shape))
        out._backward = bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _node(a.data.sum(), "sum_all", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, np.broadcast_to(out.grad, a.data.shape))
        out._backward = bw
    return out


def sum_lastdim(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"sum_lastdim: 2-D input required, got {a.data.shape}")
    out = _node(a.data.sum(axis=-1), "sum_lastdim", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, np.broadcast_to(out.grad[:, None], a.data.shape))
        out._backward = bw
    return out


def squared_l2(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences of two equal-length vectors."""
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise DimensionError(f"squared_l2: vectors of equal length required, got {a.data.shape} and {b.data.shape}")
    diff = a.data - b.data
    out = _node((diff * diff).sum(), "squared_l2", (a, b))
    if out.requires_grad:
        def bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, 2.0 * diff * g)
            if b.requires_grad:
                _acc(b, -2.0 * diff * g)
        out._backward = bw
    return out


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of squared L2 distances between the rows of a and the rows of b."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"pairwise_sqdist: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = _node(K.pairwise_sqdist(a.data, b.data), "pairwise_sqdist", (a, b))
    if out.requires_grad:
        def bw():
            ga, gb = K.pairwise_sqdist_bwd(a.data, b.data, out.grad)
            if a.requires_grad:
                _acc(a, ga)
            if b.requires_grad:
                _acc(b, gb)
        out._backward = bw
    return out


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_rows: empty input")
    out = _node(np.concatenate([p.data for p in parts], axis=0), "concat_rows", parts)
    if out.requires_grad:
        sizes = [p.data.shape[0] for p in parts]
        def bw():
            g = out.grad
            off = 0
            for p, sz in zip(parts, sizes):
                if p.requires_grad:
                    _acc(p, g[off:off + sz])
                off += sz
        out._backward = bw
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_cols: empty input")
    out = _node(np.concatenate([p.data for p in parts], axis=1), "concat_cols", parts)
    if out.requires_grad:
        sizes = [p.data.shape[1] for p in parts]
        def bw():
            g = out.grad
            off = 0
            for p, sz in zip(parts, sizes):
                if p.requires_grad:
                    _acc(p, g[:, off:off + sz])
                off += sz
        out._backward = bw
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = _node(a.data[start:stop], "slice_rows", (a,))
    if out.requires_grad:
        def bw():
            g = np.zeros_like(a.data)
            g[start:stop] = out.grad
            _acc(a, g)
        out._backward = bw
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = _node(a.data[:, start:stop], "slice_cols", (a,))
    if out.requires_grad:
        def bw():
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            _acc(a, g)
        out._backward = bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _node(a.data.reshape(shape), "reshape", (a,))
    if out.requires_grad:
        def bw():
            _acc(a, out.grad.reshape(a.data.shape))
        out._backward = bw
    return out


def pick_per_row(a: Tensor, idx) -> Tensor:
    """Gather a[i, idx[i]] for every row i."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = _node(a.data[rows, idx], "pick_per_row", (a,))
    if out.requires_grad:
        def bw():
            g = np.zeros_like(a.data)
            g[rows, idx] = out.grad
            _acc(a, g)
        out._backward = bw
    return out


# -------------------------------------------------------------- gradcheck --

@dataclass
class GradcheckReport:
    """Per-parameter max relative error of analytic vs central-difference grads."""

    per_param: dict[str, float]
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.per_param.values())

    def lines(self) -> list[str]:
        width = max(len(n) for n in self.per_param)
        out = []
        for name, err in self.per_param.items():
            status = "ok" if err < self.tol else "FAIL"
            out.append(f"{name:<{width}}  max_rel_err={err:.3e}  {status}")
        out.append(f"gradcheck: {'PASS' if self.passed else 'FAIL'} (h={self.h:g}, tol={self.tol:g})")
        return out


def gradcheck(build, params: dict[str, Tensor], h: float = 1e-3, tol: float = 1e-4,
              fault_param: str | None = None) -> GradcheckReport:
    """Check analytic gradients of a scalar graph against central differences.

    `build` must reconstruct the loss from the current parameter values on
    every call; `params` maps names to the trainable tensors it reads.
    Errors are normalized per parameter tensor by the largest gradient
    magnitude seen in it (floored at 1e-6). Use float64 parameters for the
    tight tolerances to be meaningful. `fault_param` multiplies one analytic
    gradient by 1.5 before comparing - a negative control proving the
    harness can fail.
    """
    for t in params.values():
        t.zero_grad()
    loss = build()
    backward(loss)
    analytic = {}
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"gradcheck: parameter {name!r} received no gradient")
        g = np.array(t.grad, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"gradcheck: non-finite analytic gradient in {name!r}")
        analytic[name] = g
    if fault_param is not None:
        analytic[fault_param] = analytic[fault_param] * 1.5 + 1e-3

    per_param = {}
    for name, t in params.items():
        flat = t.data.ravel()
        numeric = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = build().item()
            flat[i] = orig - h
            with no_grad():
                f_minus = build().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        if not np.all(np.isfinite(numeric)):
            raise NumericError(f"gradcheck: non-finite finite-difference value in {name!r}")
        a = analytic[name].ravel()
        denom = max(np.abs(a).max(), np.abs(numeric).max(), 1e-6)
        per_param[name] = float(np.abs(a - numeric).max() / denom)
    return GradcheckReport(per_param, h=h, tol=tol)
