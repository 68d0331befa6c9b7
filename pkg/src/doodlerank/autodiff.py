"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Ops executed while a Tape is active append nodes to it; Tape.backward
replays the nodes in reverse append order, accumulating gradients
additively into each tensor's ``grad`` buffer. One tape per training step,
discarded after the parameter update. Tensors are treated as immutable
once recorded on a tape.

Broadcasting is deliberately narrow: scalar-with-tensor, the bias-add case
``(N, H) + (H,)``, and the dedicated channel-mask product
:func:`scale_channels`. Everything else requires explicit reshapes.

f32 is the training dtype; pass f64 arrays for gradient-check headroom.
Binary ops require matching dtypes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class NumericError(ArithmeticError):
    """An op produced a non-finite value."""


class GradientStateError(RuntimeError):
    """Backward was invoked in an invalid state (non-scalar, reused tape, ...)."""


_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op finiteness checks on bulk kernels; returns prior value.

    Checks on ops that can manufacture non-finite values from finite inputs
    (log, div) stay on regardless.
    """
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _check_finite(data: np.ndarray, op: str, always: bool = False) -> None:
    if not (_finite_checks or always):
        return
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")


class Tensor:
    """Dense n-dimensional value, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are plain Python numbers.
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

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    """Internal constructor that adopts ``data`` without copying."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    out._tape = None
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("op", "out", "backward")

    def __init__(self, op: str, out: Tensor, backward: Callable[[np.ndarray], None]):
        self.op = op
        self.out = out
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Append-only record of ops; reverse traversal computes gradients."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, op: str, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append(_Node(op, out, backward))
        out._tape = self

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every contributing tensor reachable from ``loss``."""
        if self._used:
            raise GradientStateError(
                "tape already consumed by backward; build a fresh tape (zero_grad between steps)"
            )
        if loss.data.size != 1:
            raise GradientStateError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GradientStateError("loss was not recorded on this tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            upstream = node.out.grad
            if upstream is None:
                continue
            node.backward(upstream)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    if loss._tape is None:
        raise GradientStateError("loss is not attached to a tape (constant graph?)")
    loss._tape.backward(loss)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(op: str, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, out, backward)


def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _scalar(x) -> float | None:
    """Return x as a Python float when it is a plain number, else None."""
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    sa, sb = _scalar(a), _scalar(b)
    if sa is not None and sb is not None:
        raise TypeError("add requires at least one Tensor operand")
    if sa is not None:
        a, b = b, a
        sb = sa
    a = as_tensor(a)
    if sb is not None:
        out = _wrap(a.data + a.data.dtype.type(sb), a.requires_grad)
        _check_finite(out.data, "add")

        def bwd_scalar(g):
            if a.requires_grad:
                _accumulate(a, g)

        _record("add", out, bwd_scalar)
        return out

    b = as_tensor(b)
    _require_same_dtype(a, b, "add")
    if a.shape == b.shape:
        out = _wrap(a.data + b.data, a.requires_grad or b.requires_grad)
        _check_finite(out.data, "add")

        def bwd_same(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g)

        _record("add", out, bwd_same)
        return out

    # Bias-add: (N, H) + (H,) in either order.
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        mat, vec = a, b
    elif b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
        mat, vec = b, a
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = _wrap(mat.data + vec.data, mat.requires_grad or vec.requires_grad)
    _check_finite(out.data, "add")

    def bwd_bias(g):
        if mat.requires_grad:
            _accumulate(mat, g)
        if vec.requires_grad:
            _accumulate(vec, g.sum(axis=0))

    _record("add", out, bwd_bias)
    return out


def sub(a, b) -> Tensor:
    sa, sb = _scalar(a), _scalar(b)
    if sb is not None:
        return add(a, -sb)
    if sa is not None:
        return add(neg(b), sa)
    return add(a, neg(b))


def neg(x) -> Tensor:
    x = as_tensor(x)
    out = _wrap(-x.data, x.requires_grad)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, -g)

    _record("neg", out, bwd)
    return out


def mul(a, b) -> Tensor:
    sa, sb = _scalar(a), _scalar(b)
    if sa is not None and sb is not None:
        raise TypeError("mul requires at least one Tensor operand")
    if sa is not None:
        a, b = b, a
        sb = sa
    a = as_tensor(a)
    if sb is not None:
        c = a.data.dtype.type(sb)
        out = _wrap(a.data * c, a.requires_grad)
        _check_finite(out.data, "mul")

        def bwd_scalar(g):
            if a.requires_grad:
                _accumulate(a, g * c)

        _record("mul", out, bwd_scalar)
        return out

    b = as_tensor(b)
    _require_same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = _wrap(a.data * b.data, a.requires_grad or b.requires_grad)
    _check_finite(out.data, "mul")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    _record("mul", out, bwd)
    return out


def div(a, b) -> Tensor:
    sa, sb = _scalar(a), _scalar(b)
    if sb is not None:
        a = as_tensor(a)
        return mul(a, 1.0 / sb)
    b = as_tensor(b)
    if sa is not None:
        a = Tensor(np.full((), sa, dtype=b.data.dtype))
        if b.data.shape != ():
            a = Tensor(np.full(b.shape, sa, dtype=b.data.dtype))
    else:
        a = as_tensor(a)
    _require_same_dtype(a, b, "div")
    if a.shape != b.shape:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _wrap(a.data / b.data, a.requires_grad or b.requires_grad)
    _check_finite(out.data, "div", always=True)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g / b.data)
        if b.requires_grad:
            _accumulate(b, -g * a.data / (b.data * b.data))

    _record("div", out, bwd)
    return out


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = _wrap(np.maximum(x.data, 0), x.requires_grad)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0))

    _record("relu", out, bwd)
    return out


# Hinge losses are written max{0, .}; same primitive, contract-level alias.
max_with_zero = relu


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    pos = d >= 0
    val = np.empty_like(d)
    val[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = _wrap(val, x.requires_grad)
    _check_finite(out.data, "sigmoid")

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * val * (1.0 - val))

    _record("sigmoid", out, bwd)
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(x.data)
    out = _wrap(val, x.requires_grad)
    _check_finite(out.data, "log", always=True)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g / x.data)

    _record("log", out, bwd)
    return out


def clamp(x, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} > hi {hi}")
    x = as_tensor(x)
    out = _wrap(np.clip(x.data, lo, hi), x.requires_grad)
    inside = (x.data > lo) & (x.data < hi)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * inside)

    _record("clamp", out, bwd)
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _reduction_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors the numpy name on purpose
    x = as_tensor(x)
    axes = _reduction_axes(axis, x.data.ndim)
    out = _wrap(x.data.sum(axis=axes), x.requires_grad)
    _check_finite(out.data, "sum")

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axes), x.shape))

    _record("sum", out, bwd)
    return out


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _reduction_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = _wrap(x.data.mean(axis=axes), x.requires_grad)
    _check_finite(out.data, "mean")

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axes), x.shape) / count)

    _record("mean", out, bwd)
    return out


_NORM_FLOOR = 1e-12  # backward stabiliser: grad of ||v|| at v=0 is defined as 0


def l2_norm(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _reduction_axes(axis, x.data.ndim)
    norms = np.sqrt((x.data * x.data).sum(axis=axes))
    out = _wrap(norms, x.requires_grad)
    _check_finite(out.data, "l2_norm")

    def bwd(g):
        if x.requires_grad:
            denom = np.maximum(norms, _NORM_FLOOR)
            scale = np.broadcast_to(np.expand_dims(g / denom, axes), x.shape)
            _accumulate(x, scale * x.data)

    _record("l2_norm", out, bwd)
    return out


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = _wrap(x.data.reshape(shape).copy(), x.requires_grad)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape))

    _record("reshape", out, bwd)
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat requires at least one tensor")
    for t in ts[1:]:
        _require_same_dtype(ts[0], t, "concat")
    out = _wrap(np.concatenate([t.data for t in ts], axis=axis), any(t.requires_grad for t in ts))
    _check_finite(out.data, "concat")
    sizes = [t.shape[axis] for t in ts]

    def bwd(g):
        offset = 0
        for t, n in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                _accumulate(t, g[tuple(sl)])
            offset += n

    _record("concat", out, bwd)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    _require_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _wrap(a.data @ b.data, a.requires_grad or b.requires_grad)
    _check_finite(out.data, "matmul")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    _record("matmul", out, bwd)
    return out


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than input ({h},{w}) with valid padding")
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r} (use 'same' or 'valid')")
    return ho, wo, pads


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, cin = xp.shape[:2]
    cols = np.empty((b, ho, wo, cin, kh, kw), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
            cols[:, :, :, :, di, dj] = patch.transpose(0, 2, 3, 1)
    return cols


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights."""
    x = as_tensor(x)
    w = as_tensor(w)
    _require_same_dtype(x, w, "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weights, got {x.shape} and {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w} (shapes {x.shape}, {w.shape})")
    if b is not None:
        b = as_tensor(b)
        _require_same_dtype(x, b, "conv2d")
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")

    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, wd, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    val = (cols.reshape(bsz * ho * wo, -1) @ wmat.T).reshape(bsz, ho, wo, cout)
    if b is not None:
        val = val + b.data
    out = _wrap(np.ascontiguousarray(val.transpose(0, 3, 1, 2)), x.requires_grad or w.requires_grad or (b is not None and b.requires_grad))
    _check_finite(out.data, "conv2d")

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        if w.requires_grad:
            gw = gmat.T @ _im2col(xp, kh, kw, stride, ho, wo).reshape(bsz * ho * wo, -1)
            _accumulate(w, gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[
                        :, :, :, :, di, dj
                    ].transpose(0, 3, 1, 2)
            _accumulate(x, gxp[:, :, pt : pt + h, pl : pl + wd])

    _record("conv2d", out, bwd)
    return out


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first window element."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: expected 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {(h, w)}")
    windows = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        bsz, c, h // 2, w // 2, 4
    )
    arg = windows.argmax(axis=4)
    val = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]
    out = _wrap(np.ascontiguousarray(val), x.requires_grad)

    def bwd(g):
        if x.requires_grad:
            onehot = arg[..., None] == np.arange(4)
            gw = g[..., None] * onehot
            gx = gw.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
            _accumulate(x, gx)

    _record("maxpool2", out, bwd)
    return out


def scale_channels(f, m) -> Tensor:
    """Multiply feature map (B, C, H, W) by a one-channel mask (B, 1, H, W)."""
    f = as_tensor(f)
    m = as_tensor(m)
    _require_same_dtype(f, m, "scale_channels")
    if f.data.ndim != 4 or m.data.ndim != 4 or m.shape[1] != 1 or f.shape[0] != m.shape[0] or f.shape[2:] != m.shape[2:]:
        raise ShapeError(f"scale_channels: incompatible shapes {f.shape} and {m.shape}")
    out = _wrap(f.data * m.data, f.requires_grad or m.requires_grad)
    _check_finite(out.data, "scale_channels")

    def bwd(g):
        if f.requires_grad:
            _accumulate(f, g * m.data)
        if m.requires_grad:
            _accumulate(m, (g * f.data).sum(axis=1, keepdims=True))

    _record("scale_channels", out, bwd)
    return out


# ---------------------------------------------------------------------------
# Gradient reversal
# ---------------------------------------------------------------------------


def grl(x, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient scaled by -lam."""
    if lam < 0:
        raise ValueError(f"grl: lambda must be >= 0, got {lam}")
    x = as_tensor(x)
    out = _wrap(x.data, x.requires_grad)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, (-lam) * g)

    _record("grl", out, bwd)
    return out
