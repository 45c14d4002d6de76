"""Dense float64 tensors with reverse-mode differentiation on a tape.

Everything in this package flows through :class:`Tensor`. Arrays are kept in
64-bit floats throughout so tests can pin identities at the 1e-12 level.
Operations executed inside a ``with Tape():`` block are recorded in execution
order; ``Tape.backward`` replays the records in reverse and accumulates
gradients into ``Tensor.grad``. Outside a tape the same functions run forward
only, which is what inference paths use.

Broadcasting follows the trailing-dimension rule: shapes are aligned from the
right and a size-1 extent stretches. Gradients of broadcast operands are
summed back down to the operand's shape.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import DegenerateMaskError, NumericError, ShapeError

_NEG_INF = float("-inf")
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; backward replays it in reverse.

    Distinct tapes are independent. Backward on an empty tape is a no-op.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[str, "Tensor", Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not on top")
        stack.pop()

    def record(self, name: str, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((name, out, backward))

    def backward(self, root: "Tensor") -> None:
        """Seed ``root`` with a gradient of ones and run every rule in reverse."""
        root.grad = np.ones_like(root.data)
        for _, out, rule in reversed(self.nodes):
            if out.grad is None:
                continue  # branch never reached the root
            rule(out.grad)

    def first_nonfinite(self) -> str | None:
        """Name of the earliest recorded op whose output went non-finite."""
        for name, out, _ in self.nodes:
            if not np.all(np.isfinite(out.data)):
                return name
        return None


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.needs_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, needs_grad={self.needs_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(name: str, out: Tensor, inputs: Iterable[Tensor], rule: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.needs_grad for t in inputs):
        out.needs_grad = True
        tape.record(name, out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after trailing-dim broadcast."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_op(name: str, a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = Tensor(out_data)

    def rule(g: np.ndarray) -> None:
        if a.needs_grad:
            a.accumulate(_unbroadcast(da(g), a.shape))
        if b.needs_grad:
            b.accumulate(_unbroadcast(db(g), b.shape))

    return _record(name, out, (a, b), rule)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op("add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op("sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op("mul", a, b, lambda x, y: x * y, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise NumericError("div: zero denominator")
    return _broadcast_op(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    out = Tensor(x.data * k)

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            x.accumulate(g * k)

    return _record("scale", out, (x,), rule)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            x.accumulate(g * (x.data > 0.0))

    return _record("relu", out, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, 0.5*x*(1+erf(x/sqrt(2)))."""
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            x.accumulate(g * (cdf + x.data * pdf))

    return _record("gelu", out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            x.accumulate(g * out.data)

    return _record("exp", out, (x,), rule)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log: argument must be strictly positive")
    out = Tensor(np.log(x.data))

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            x.accumulate(g / x.data)

    return _record("log", out, (x,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g: np.ndarray) -> None:
        if a.needs_grad:
            a.accumulate(g @ b.data.T)
        if b.needs_grad:
            b.accumulate(a.data.T @ g)

    return _record("matmul", out, (a, b), rule)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def rule(g: np.ndarray) -> None:
        if not x.needs_grad:
            return
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.shape).copy() if keepdims else np.full(x.shape, float(g)))
            return
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % x.ndim for a in axes):
                gg = np.expand_dims(gg, ax)
        x.accumulate(np.broadcast_to(gg, x.shape).copy())

    return _record("sum", out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.shape[ax % x.ndim]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            soft = np.exp(out.data)
            x.accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _record("log_softmax", out, (x,), rule)


def masked_softmax_rows(scores: Tensor, mask: Tensor) -> Tensor:
    """Row-wise softmax of ``scores + mask`` where mask entries are 0 or -inf.

    The row max used for stabilization is taken over available entries only,
    so masked positions come out as an exact IEEE 0.0 and each row of the
    result sums to 1 over the available set. Masked positions are constants
    for the backward pass. A fully masked row is an error, not a NaN.
    """
    if scores.ndim != 2 or mask.ndim != 2:
        raise ShapeError(f"masked softmax expects rank-2 inputs, got {scores.shape} and {mask.shape}")
    if scores.shape != mask.shape:
        raise ShapeError(f"masked softmax: scores {scores.shape} and mask {mask.shape} differ")
    m = mask.data
    if not np.all((m == 0.0) | (m == _NEG_INF)):
        raise ValueError("mask entries must be exactly 0 or -inf")
    if not np.all(np.isfinite(scores.data)):
        raise NumericError("masked softmax: scores must be finite")
    available = m == 0.0
    dead = ~available.any(axis=1)
    if dead.any():
        rows = np.flatnonzero(dead).tolist()
        raise DegenerateMaskError(f"fully masked attention row(s) {rows}: nothing to normalize over")

    shifted = scores.data + m
    # max over a row ignores -inf as long as one finite entry exists
    row_max = shifted.max(axis=1, keepdims=True)
    weights = np.exp(shifted - row_max)  # exp(-inf) == +0.0 exactly
    total = weights.sum(axis=1, keepdims=True)
    out = Tensor(weights / total)

    def rule(g: np.ndarray) -> None:
        if scores.needs_grad:
            a = out.data
            scores.accumulate(a * (g - (g * a).sum(axis=1, keepdims=True)))

    return _record("masked_softmax_rows", out, (scores,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a rank-2 input to zero mean and unit variance."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a rank-2 input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def rule(g: np.ndarray) -> None:
        if gain.needs_grad:
            gain.accumulate((g * xhat).sum(axis=0))
        if bias.needs_grad:
            bias.accumulate(g.sum(axis=0))
        if x.needs_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            x.accumulate(term * inv)

    return _record("layer_norm", out, (x, gain, bias), rule)


# ---------------------------------------------------------------------------
# data movement


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from exc

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            x.accumulate(g.reshape(x.shape))

    return _record("reshape", out, (x,), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation of rank {x.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = Tensor(x.data.transpose(axes))

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            x.accumulate(g.transpose(inverse))

    return _record("transpose", out, (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def rule(g: np.ndarray) -> None:
        offset = 0
        for p, n in zip(parts, sizes):
            if p.needs_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                p.accumulate(g[tuple(idx)])
            offset += n

    return _record("concat", out, tuple(parts), rule)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along one axis."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] exceeds axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            buf = np.zeros_like(x.data)
            buf[idx] = g
            x.accumulate(buf)

    return _record("narrow", out, (x,), rule)


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a rank-2 table; gradient scatter-adds back."""
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a rank-2 table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim > 1:
        raise ShapeError("take_rows indices must be a scalar or flat list")
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeError(f"take_rows index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def rule(g: np.ndarray) -> None:
        if table.needs_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            table.accumulate(buf)

    return _record("take_rows", out, (table,), rule)


# ---------------------------------------------------------------------------
# convolution and resampling


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Closed-form output size: floor((extent + 2*padding - kernel)/stride) + 1."""
    if kernel <= 0 or stride <= 0 or padding < 0 or extent <= 0:
        raise ShapeError(f"bad conv geometry extent={extent} kernel={kernel} stride={stride} padding={padding}")
    span = extent + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded input {extent + 2 * padding}")
    return span // stride + 1


def _conv_nd(name: str, nd: int, x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    if x.ndim != nd + 2:
        raise ShapeError(f"{name} expects rank-{nd + 2} input [batch, ch, spatial...], got {x.shape}")
    if weight.ndim != nd + 2:
        raise ShapeError(f"{name} expects rank-{nd + 2} weight [out, in, kernel...], got {weight.shape}")
    batch, in_ch = x.shape[0], x.shape[1]
    out_ch, w_in = weight.shape[0], weight.shape[1]
    if in_ch != w_in:
        raise ShapeError(f"{name}: input channels {in_ch} != weight channels {w_in}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"{name}: bias shape {bias.shape} must be ({out_ch},)")
    kernel = weight.shape[2:]
    spatial = x.shape[2:]
    out_spatial = tuple(conv_output_extent(e, k, stride, padding) for e, k in zip(spatial, kernel))

    pad_spec = [(0, 0), (0, 0)] + [(padding, padding)] * nd
    xp = np.pad(x.data, pad_spec) if padding else x.data

    out_data = np.zeros((batch, out_ch) + out_spatial)
    offsets = list(np.ndindex(*kernel))

    def window(k_off):
        sl = [slice(None), slice(None)]
        sl += [slice(k, k + stride * o, stride) for k, o in zip(k_off, out_spatial)]
        return tuple(sl)

    for k_off in offsets:
        xs = xp[window(k_off)]  # [batch, in_ch, *out_spatial]
        wk = weight.data[(slice(None), slice(None)) + k_off]  # [out_ch, in_ch]
        out_data += np.moveaxis(np.tensordot(wk, xs, axes=([1], [1])), 1, 0)
    if bias is not None:
        out_data += bias.data.reshape((1, out_ch) + (1,) * nd)
    out = Tensor(out_data)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g: np.ndarray) -> None:
        spatial_axes = tuple(range(2, nd + 2))
        if bias is not None and bias.needs_grad:
            bias.accumulate(g.sum(axis=(0,) + spatial_axes))
        need_x = x.needs_grad
        need_w = weight.needs_grad
        if not (need_x or need_w):
            return
        gxp = np.zeros_like(xp) if need_x else None
        for k_off in offsets:
            idx = window(k_off)
            if need_w:
                xs = xp[idx]
                dw = np.tensordot(g, xs, axes=([0] + list(spatial_axes), [0] + list(spatial_axes)))
                if weight.grad is None:
                    weight.grad = np.zeros_like(weight.data)
                weight.grad[(slice(None), slice(None)) + k_off] += dw
            if need_x:
                wk = weight.data[(slice(None), slice(None)) + k_off]
                gxp[idx] += np.moveaxis(np.tensordot(g, wk, axes=([1], [0])), -1, 1)
        if need_x:
            if padding:
                crop = (slice(None), slice(None)) + tuple(slice(padding, padding + e) for e in spatial)
                x.accumulate(gxp[crop])
            else:
                x.accumulate(gxp)

    return _record(name, out, inputs, rule)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over [batch, ch, h, w] with square stride/padding."""
    return _conv_nd("conv2d", 2, x, weight, bias, stride, padding)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over [batch, ch, d, h, w] with cubic stride/padding."""
    return _conv_nd("conv3d", 3, x, weight, bias, stride, padding)


def upsample3d_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every voxel ``factor`` times along each spatial axis."""
    if x.ndim != 5:
        raise ShapeError(f"upsample3d expects rank-5 input, got {x.shape}")
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    out_data = x.data
    for axis in (2, 3, 4):
        out_data = np.repeat(out_data, factor, axis=axis)
    out = Tensor(out_data)

    def rule(g: np.ndarray) -> None:
        if x.needs_grad:
            b, c, d, h, w = x.shape
            gg = g.reshape(b, c, d, factor, h, factor, w, factor)
            x.accumulate(gg.sum(axis=(3, 5, 7)))

    return _record("upsample3d_nearest", out, (x,), rule)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error at each coordinate is |analytic - numeric| / max(1, |analytic|,
    |numeric|); the function returns the max over coordinates. ``h`` must lie
    in [1e-6, 1e-4].
    """
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"step size h={h} outside [1e-6, 1e-4]")
    was_needed = x.needs_grad
    x.needs_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
            if y.size != 1:
                raise ShapeError(f"grad_check target must be scalar, got shape {y.shape}")
            if not np.isfinite(y.data.reshape(())):
                raise NumericError("grad_check: objective is not finite")
            tape.backward(y)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.needs_grad = was_needed
        x.grad = None

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * h)
    if not np.all(np.isfinite(numeric)):
        raise NumericError("grad_check: non-finite finite-difference estimate")
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
