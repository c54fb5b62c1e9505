"""Differentiable 2-D tensor primitives with reverse-mode gradient accumulation.

Values are double-precision numpy arrays of shape (rows, cols). Operations
whose inputs are attached to a :class:`Tape` are recorded in execution order,
so :func:`backward` can replay the tape in reverse and accumulate adjoints.
Tensors with no tape are plain immutable values and safe to share across
threads; a single tape must only be driven from one thread.

Every primitive here is checkable against central finite differences via
:func:`grad_check`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "scale_rows",
    "relu",
    "sigmoid",
    "softmax_rows",
    "l2_normalize_rows",
    "logsumexp_rows",
    "log_clamped",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "gather_rows",
    "row_sums",
    "sum_all",
    "mean_all",
    "check_finite",
    "grad_check",
]

NORM_EPS = 1e-12
LOG_CLAMP_LO = 1e-7
LOG_CLAMP_HI = 1.0 - 1e-7

# Smallest positive / largest below-one doubles; sigmoid output is clipped
# into this open interval so log-based losses never see exactly 0 or 1.
_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite ones."""


class Tensor:
    """A rows x cols double-precision value, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "grad", "op", "_parents", "_backward")

    def __init__(self, data, tape=None, op="const", parents=(), backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensor data must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Tape:
    """Ordered record of executed operations for one forward pass.

    Execution order is a topological order of the value graph, so walking
    ``nodes`` backwards visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, data, op="leaf") -> Tensor:
        t = Tensor(data, tape=self, op=op)
        self.nodes.append(t)
        return t


def _record(op, data, parents, backward_fn) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif tape is not p.tape:
                raise ValueError(f"op {op!r} mixes tensors from two different tapes")
    out = Tensor(data, tape=tape, op=op, parents=parents, backward=backward_fn)
    if tape is not None:
        tape.nodes.append(out)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate adjoints of every tape node with respect to a 1x1 loss.

    All node adjoints are reset to zero first, so nodes the loss does not
    depend on end up with exactly-zero gradients.
    """
    if loss.tape is None:
        raise ValueError("backward needs a tensor recorded on a tape")
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 scalar, got {loss.shape}")
    for node in loss.tape.nodes:
        node.grad = np.zeros_like(node.data)
    loss.grad[0, 0] = 1.0
    for node in reversed(loss.tape.nodes):
        if node._backward is not None:
            node._backward(node.grad)


def _on_tape(t: Tensor) -> bool:
    return t.tape is not None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if _on_tape(a):
            a.grad += g @ b.data.T
        if _on_tape(b):
            b.grad += a.data.T @ g

    return _record("matmul", out_data, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    def bwd(g):
        if _on_tape(x):
            x.grad += g.T

    return _record("transpose", x.data.T, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the only broadcast allowed is a 1 x cols bias as `b`."""
    bias = b.shape == (1, a.cols) and a.rows != 1
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out_data = a.data + b.data

    def bwd(g):
        if _on_tape(a):
            a.grad += g
        if _on_tape(b):
            b.grad += g.sum(axis=0, keepdims=True) if bias else g

    return _record("add", out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def bwd(g):
        if _on_tape(a):
            a.grad += g
        if _on_tape(b):
            b.grad -= g

    return _record("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def bwd(g):
        if _on_tape(a):
            a.grad += g * b.data
        if _on_tape(b):
            b.grad += g * a.data

    return _record("mul", a.data * b.data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if _on_tape(x):
            x.grad += c * g

    return _record("scale", c * x.data, (x,), bwd)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row t of x by the scalar s[t, 0]; s must be rows x 1."""
    if s.shape != (x.rows, 1):
        raise ShapeError(f"scale_rows needs {x.rows}x1 scalars, got {s.shape}")
    out_data = x.data * s.data

    def bwd(g):
        if _on_tape(x):
            x.grad += g * s.data
        if _on_tape(s):
            s.grad += (g * x.data).sum(axis=1, keepdims=True)

    return _record("scale_rows", out_data, (x, s), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        if _on_tape(x):
            x.grad += g * mask

    return _record("relu", np.where(mask, x.data, 0.0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; outputs lie strictly inside (0, 1)."""
    out_data = _sigmoid_data(x.data)

    def bwd(g):
        if _on_tape(x):
            x.grad += g * out_data * (1.0 - out_data)

    return _record("sigmoid", out_data, (x,), bwd)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with row-max subtraction for overflow safety."""
    y = _softmax_data(x.data)

    def bwd(g):
        if _on_tape(x):
            x.grad += y * (g - (g * y).sum(axis=1, keepdims=True))

    return _record("softmax_rows", y, (x,), bwd)


def _softmax_data(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Divide each row by max(||row||_2, eps)."""
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    denom = np.maximum(norms, NORM_EPS)
    y = x.data / denom

    def bwd(g):
        if _on_tape(x):
            live = norms > NORM_EPS
            dot = (g * y).sum(axis=1, keepdims=True)
            x.grad += np.where(live, (g - y * dot) / denom, g / NORM_EPS)

    return _record("l2_normalize_rows", y, (x,), bwd)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable log(sum(exp(row))) per row, returned as rows x 1."""
    m = x.data.max(axis=1, keepdims=True)
    out_data = m + np.log(np.exp(x.data - m).sum(axis=1, keepdims=True))
    soft = _softmax_data(x.data)

    def bwd(g):
        if _on_tape(x):
            x.grad += g * soft

    return _record("logsumexp_rows", out_data, (x,), bwd)


def log_clamped(x: Tensor, lo: float = LOG_CLAMP_LO, hi: float = LOG_CLAMP_HI) -> Tensor:
    """Elementwise log of x clamped into [lo, hi]; gradient is zero when clamped."""
    clamped = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        if _on_tape(x):
            x.grad += np.where(inside, g / clamped, 0.0)

    return _record("log_clamped", np.log(clamped), (x,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(
                f"concat_cols row mismatch: {[q.shape for q in parts]}"
            )
    widths = [p.cols for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        j = 0
        for p, w in zip(parts, widths):
            if _on_tape(p):
                p.grad += g[:, j : j + w]
            j += w

    return _record("concat_cols", out_data, tuple(parts), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError(
                f"concat_rows column mismatch: {[q.shape for q in parts]}"
            )
    heights = [p.rows for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)

    def bwd(g):
        i = 0
        for p, h in zip(parts, heights):
            if _on_tape(p):
                p.grad += g[i : i + h, :]
            i += h

    return _record("concat_rows", out_data, tuple(parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.cols):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")

    def bwd(g):
        if _on_tape(x):
            x.grad[:, start:stop] += g

    return _record("slice_cols", x.data[:, start:stop].copy(), (x,), bwd)


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ShapeError("gather_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= x.rows:
        raise ShapeError(f"gather_rows index out of range for {x.rows} rows")

    def bwd(g):
        if _on_tape(x):
            np.add.at(x.grad, idx, g)

    return _record("gather_rows", x.data[idx].copy(), (x,), bwd)


def row_sums(x: Tensor) -> Tensor:
    def bwd(g):
        if _on_tape(x):
            x.grad += g  # (rows,1) broadcasts across columns

    return _record("row_sums", x.data.sum(axis=1, keepdims=True), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        if _on_tape(x):
            x.grad += g[0, 0]

    return _record("sum_all", x.data.sum().reshape(1, 1), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        if _on_tape(x):
            x.grad += g[0, 0] / n

    return _record("mean_all", x.data.mean().reshape(1, 1), (x,), bwd)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def check_finite(tape: Tape) -> None:
    """Raise NumericError naming the first op that produced a non-finite value."""
    for node in tape.nodes:
        if not np.isfinite(node.data).all():
            raise NumericError(f"non-finite value produced by op {node.op!r}")


def grad_check(f, x, h: float = 1e-5) -> float:
    """Compare the taped gradient of a scalar-valued f against central differences.

    Returns max over entries of |analytic - numeric| / max(1, |analytic|).
    `f` must accept one Tensor and return a 1x1 Tensor; it is re-evaluated
    2 * x.size times on perturbed constant inputs.
    """
    base = np.array(x, dtype=np.float64)
    if base.ndim == 1:
        base = base.reshape(1, -1)
    tape = Tape()
    leaf = tape.leaf(base)
    out = f(leaf)
    check_finite(tape)
    if out.tape is None:
        # f's value never touched the leaf: the analytic gradient is zero
        analytic = np.zeros_like(base)
    else:
        backward(out)
        analytic = leaf.grad.copy()

    numeric = np.zeros_like(base)
    for idx in np.ndindex(*base.shape):
        xp = base.copy()
        xp[idx] += h
        xm = base.copy()
        xm[idx] -= h
        fp = f(Tensor(xp)).item()
        fm = f(Tensor(xm)).item()
        numeric[idx] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
