"""Dense float tensors with reverse-mode autodiff on an explicit tape.

Minimal op set for recurrent nets with sigmoid gating: matmul, pointwise
arithmetic, bias rows, activations, row softmax, reductions, and stabilized
cross-entropy losses. Arrays are float32 by default; building a graph from
float64 tensors keeps everything in float64 (used by gradient checks).

Ops record onto the currently active ``Tape``. With no tape active the same
functions run as plain forward computations, which is how evaluation and
finite-difference probing avoid autodiff overhead.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "no_tape",
    "matmul",
    "add_bias",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "softmax_xent",
    "binary_xent",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf; the graph is in an error state."""


_ACTIVE_TAPE = None


@contextmanager
def no_tape():
    """Run ops without recording, even inside an active tape context."""
    global _ACTIVE_TAPE
    saved = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = saved


class Tape:
    """Ordered record of ops; creation order is the topological order.

    One tape per forward/backward pass. ``backward`` resets gradients first,
    so calling it twice yields identical gradients rather than silently
    double-accumulating.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, root: "Tensor") -> None:
        """Accumulate d(root)/d(leaf) into ``.grad`` of every recorded tensor.

        ``root`` must be a scalar recorded on this tape (or a leaf).
        """
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
            for p in node._parents:
                p.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


class Tensor:
    """A dense numeric array plus gradient slot.

    ``requires_grad`` marks trainable leaves; op outputs inherit it from
    their inputs. ``grad`` is populated by ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def sum(self) -> "Tensor":
        """Sum of all entries, as a scalar tensor."""
        out_data = np.asarray(self.data.sum(), dtype=self.data.dtype)

        def backward(g):
            _accum(self, np.broadcast_to(g, self.data.shape))

        return _node(out_data, (self,), backward)

    def mean(self) -> "Tensor":
        return self.sum() / float(self.data.size)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return _pointwise(self, other, "add")

    def __radd__(self, other):
        return _pointwise(self, other, "add")

    def __sub__(self, other):
        return _pointwise(self, other, "sub")

    def __rsub__(self, other):
        return _pointwise(self, other, "rsub")

    def __mul__(self, other):
        return _pointwise(self, other, "mul")

    def __rmul__(self, other):
        return _pointwise(self, other, "mul")

    def __truediv__(self, other):
        return _pointwise(self, other, "div")

    def __rtruediv__(self, other):
        return _pointwise(self, other, "rdiv")

    def __neg__(self):
        return _pointwise(self, -1.0, "mul")

    def __matmul__(self, other):
        return matmul(self, other)


def _guard(data: np.ndarray) -> np.ndarray:
    # a single reduction: any nan/inf poisons the sum (opposing infs -> nan)
    if not np.isfinite(data.sum()):
        raise NonFiniteError("forward op produced non-finite values")
    return data


def _node(data, parents, backward):
    """Build an op-output tensor, recording it if a tape is active."""
    _guard(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        _ACTIVE_TAPE.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # rebind, never mutate in place: incoming arrays may be shared
    t.grad = g if t.grad is None else t.grad + g


def _pointwise(a: Tensor, b, kind: str) -> Tensor:
    """Pointwise arithmetic; shapes must match exactly or one side is scalar."""
    b_is_tensor = isinstance(b, Tensor)
    b_data = b.data if b_is_tensor else np.asarray(b, dtype=a.data.dtype)
    if b_data.size != 1 and a.data.size != 1 and b_data.shape != a.data.shape:
        raise ShapeError(f"pointwise {kind}: shapes {a.shape} vs {b_data.shape}")

    with np.errstate(all="ignore"):  # the NonFiniteError guard reports these
        if kind == "add":
            data = a.data + b_data
        elif kind == "sub":
            data = a.data - b_data
        elif kind == "rsub":
            data = b_data - a.data
        elif kind == "mul":
            data = a.data * b_data
        elif kind == "div":
            data = a.data / b_data
        elif kind == "rdiv":
            data = b_data / a.data
        else:
            raise ValueError(f"unknown pointwise kind {kind!r}")

    parents = (a, b) if b_is_tensor else (a,)

    def backward(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "rsub":
            ga, gb = -g, g
        elif kind == "mul":
            ga, gb = g * b_data, g * a.data
        elif kind == "div":
            ga = g / b_data
            gb = -g * a.data / (b_data * b_data)
        else:  # rdiv
            ga = -g * b_data / (a.data * a.data)
            gb = g / a.data
        _accum(a, _reduce_to(ga, a.data.shape))
        if b_is_tensor:
            _accum(b, _reduce_to(gb, b_data.shape))

    return _node(data, parents, backward)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # collapse a gradient back to a scalar operand's shape
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    with np.errstate(all="ignore"):
        data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(data, (a, b), backward)


def add_bias(mat: Tensor, bias: Tensor) -> Tensor:
    """Add a bias row-vector to every row of a 2-D tensor."""
    if mat.data.ndim != 2 or bias.data.ndim != 1 or mat.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: {mat.shape} with bias {bias.shape}")
    data = mat.data + bias.data

    def backward(g):
        _accum(mat, g)
        _accum(bias, g.sum(axis=0))

    return _node(data, (mat, bias), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b, one tape node."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine: {x.shape} @ {w.shape} + {b.shape}")
    with np.errstate(all="ignore"):
        data = x.data @ w.data + b.data

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _node(data, (x, w, b), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp may overflow to inf for very negative x; 1/(1+inf) = 0 is the
    # correct saturated value, so the result is always finite in [0, 1]
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _node(y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - y * y))

    return _node(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is defined as 0
    y = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _node(y, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return _node(y, (x,), backward)


def softmax_xent(logits: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class targets.

    ``mask`` (0/1 per row) drops rows from the loss and from gradients.
    ``reduction`` is "mean" over unmasked rows or plain "sum".
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_xent needs 2-D logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets)
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match batch {n}")
    t = t.astype(np.int64)
    if t.min(initial=0) < 0 or t.max(initial=0) >= c:
        raise ValueError(f"class index out of range [0, {c})")
    m = np.ones(n, dtype=logits.data.dtype) if mask is None else np.asarray(mask, dtype=logits.data.dtype)

    x = logits.data
    mx = x.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(x - mx).sum(axis=1))
    nll = (lse - x[np.arange(n), t]) * m

    if reduction == "mean":
        denom = float(m.sum())
        if denom == 0.0:
            raise ValueError("softmax_xent: no unmasked rows in batch")
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    data = np.asarray(nll.sum() / denom, dtype=x.dtype)

    def backward(g):
        p = np.exp(x - mx)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        p *= (m * (float(g) / denom))[:, None]
        _accum(logits, p)

    return _node(data, (logits,), backward)


def binary_xent(logits: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Per-cell binary cross-entropy on logits, numerically stabilized.

    ``targets`` are 0/1 with the same shape as ``logits``; ``mask`` marks
    observed cells. Mean is over observed cells.
    """
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {x.shape}")
    m = np.ones_like(x) if mask is None else np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape:
        raise ShapeError(f"mask shape {m.shape} != logits shape {x.shape}")

    bce = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))) * m
    if reduction == "mean":
        denom = float(m.sum())
        if denom == 0.0:
            raise ValueError("binary_xent: no observed cells in batch")
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    data = np.asarray(bce.sum() / denom, dtype=x.dtype)

    def backward(g):
        _accum(logits, (_sigmoid_np(x) - t) * m * (float(g) / denom))

    return _node(data, (logits,), backward)


def finite_difference_check(f, params, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(params) -> Tensor`` must be a deterministic scalar function of the
    given parameter tensors (fix any noise before calling). Differences are
    accumulated in float64. Relative error per entry is
    |analytic - numeric| / max(1e-8, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with Tape() as tape:
        loss = f(params)
        tape.backward(loss)
    grads = []
    for p in params:
        if p.grad is None:
            grads.append(np.zeros_like(p.data, dtype=np.float64))
        else:
            grads.append(np.asarray(p.grad, dtype=np.float64).copy())

    worst = 0.0
    for p, analytic in zip(params, grads):
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(params).item())
            flat[i] = orig - eps
            down = float(f(params).item())
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            rel = abs(float(aflat[i]) - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, rel)
    return worst
