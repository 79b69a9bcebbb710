"""Dense tensors with reverse-mode automatic differentiation.

Only the operation set needed by the network lives here: 2-D convolution
and its transpose, max pooling, batch normalisation, the channel-attention
primitives and the smooth-L1 loss.  Every differentiable op records a
:class:`Node` carrying a monotone sequence number; :func:`backward` replays
the nodes reachable from a scalar loss in reverse recording order.

Storage is float32.  Inside :func:`float64_mode` newly created tensors are
float64, which gives gradient checks a high-precision shadow path through
exactly the same code.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Node",
    "Tape",
    "BatchNormState",
    "no_grad",
    "float64_mode",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "sum",
    "mean",
    "reshape",
    "relu",
    "sigmoid",
    "scale_channels",
    "global_avg_pool",
    "concat_channels",
    "slice_channels",
    "depth_to_space",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "batchnorm2d",
    "smooth_l1",
    "numerical_gradient",
    "relative_error",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


_default_dtype = np.float32
_grad_enabled = True
_sequence = itertools.count()


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def float64_mode():
    """Create new tensors in float64 inside the block (gradient-check shadow path)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: its inputs and a rule mapping the output
    gradient to one gradient per input (``None`` for no contribution)."""

    __slots__ = ("seq", "op", "inputs", "rule")

    def __init__(self, op: str, inputs: Sequence["Tensor"], rule: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = tuple(inputs)
        self.rule = rule

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """A float array with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; converted to the current default dtype (float32 unless inside
        :func:`float64_mode`) unless ``dtype`` is given.
    requires_grad : bool
        Leaf tensors with this flag receive a ``grad`` buffer on backward.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
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
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.node = Node(op, inputs, rule)
    return out


class Tape:
    """The operations reachable from one output, in recording order.

    ``entries`` pairs each :class:`Node` with the tensor it produced.
    """

    def __init__(self, entries: list[tuple[Node, Tensor]]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        entries = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node is None or id(t.node) in seen:
                continue
            seen.add(id(t.node))
            entries.append((t.node, t))
            stack.extend(t.node.inputs)
        entries.sort(key=lambda e: e[0].seq)
        return cls(entries)

    @property
    def nodes(self) -> list[Node]:
        return [n for n, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable
    from ``loss`` that requires grad.  Repeated calls accumulate."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    # Gradient flowing through this call only; t.grad keeps the running total.
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node, out in reversed(tape.entries):
        g = flow.pop(id(out), None)
        if g is None:
            continue
        _deposit(out, g)
        for inp, gi in zip(node.inputs, node.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flow:
                flow[key] = flow[key] + gi
            else:
                flow[key] = gi
                if inp.node is None:
                    leaves[key] = inp
    for key, g in flow.items():
        _deposit(leaves[key], g)
    for node, _ in tape.entries:
        for inp in node.inputs:
            if inp.requires_grad and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)


def _deposit(t: Tensor, g: np.ndarray):
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------------
# elementwise and reductions


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _same_shape("add", x, y)
    return _record(x.data + y.data, "add", (x, y), lambda g: (g, g))


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _same_shape("sub", x, y)
    return _record(x.data - y.data, "sub", (x, y), lambda g: (g, -g))


def mul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _same_shape("mul", x, y)
    return _record(x.data * y.data, "mul", (x, y), lambda g: (g * y.data, g * x.data))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the array API
    shape = x.shape
    return _record(np.sum(x.data).reshape(()), "sum", (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _record(np.mean(x.data).reshape(()), "mean", (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _record(data, "reshape", (x,), lambda g: (g.reshape(old),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so neither branch overflows.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _record(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of ``x`` (N,C,H,W) by ``s`` (N,C,1,1)."""
    if x.ndim != 4 or s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise DimensionError(f"scale_channels: cannot scale {x.shape} by {s.shape}")

    def rule(g):
        return g * s.data, np.sum(g * x.data, axis=(2, 3), keepdims=True)

    return _record(x.data * s.data, "scale_channels", (x, s), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool: need (N,C,H,W) with H,W >= 1, got {x.shape}")
    n, c, h, w = x.shape

    def rule(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _record(x.data.mean(axis=(2, 3), keepdims=True), "global_avg_pool", (x,), rule)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: {a.shape} and {b.shape} disagree outside the channel axis")
    ca = a.shape[1]
    return _record(np.concatenate([a.data, b.data], axis=1), "concat_channels", (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 4 or not 0 <= start <= stop <= x.shape[1]:
        raise DimensionError(f"slice_channels: [{start}:{stop}] out of range for {x.shape}")

    def rule(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop].copy(), "slice_channels", (x,), rule)


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r) (sub-pixel shuffle)."""
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise DimensionError(f"depth_to_space: {crr} channels not divisible by {r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def rule(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _record(np.ascontiguousarray(out), "depth_to_space", (x,), rule)


# ----------------------------------------------------------------------------
# convolution kernels on raw arrays


def _gather(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """out[n,o,y,x] = sum_{c,i,j} w[o,c,i,j] * xp[n,c,i+stride*y,j+stride*x]."""
    _, _, kh, kw = w.shape
    acc = None
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            term = np.tensordot(w[:, :, i, j], patch, axes=([1], [1]))
            if acc is None:
                acc = term
            else:
                acc += term
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Adjoint of :func:`_gather` with respect to ``xp``."""
    n, _, ho, wo = g.shape
    _, c, kh, kw = w.shape
    out = np.zeros((c, n, hp, wp), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            term = np.tensordot(w[:, :, i, j], g, axes=([0], [1]))
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += term
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _kernel_grad(xp: np.ndarray, g: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`_gather` with respect to ``w``."""
    _, ho, wo = g.shape[1:]
    grad = np.empty((g.shape[1], xp.shape[1], kh, kw), dtype=np.result_type(g, xp))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            grad[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
    return grad


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(x: np.ndarray, pad: int, h: int, w: int) -> np.ndarray:
    return x[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``w`` (Cout,Cin,kh,kw), zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or pad < 0:
        raise DimensionError("conv2d: stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = _zero_pad(x.data, pad)
    out = _gather(xp, w.data, stride, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def rule(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unpad(_scatter(g, w.data, stride, hp, wp), pad, h, wd)
        if w.requires_grad:
            gw = _kernel_grad(xp, g, stride, kh, kw)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, "conv2d", inputs, rule)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is (Cin,Cout,kh,kw).

    Output size is ``(H-1)*stride - 2*pad + kh``.  Forward is the data
    gradient of :func:`conv2d` with the same kernel.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv_transpose2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if stride < 1:
        raise DimensionError("conv_transpose2d: stride must be >= 1")
    n, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv_transpose2d: input has {cin} channels, kernel expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho <= 0 or wo <= 0 or pad < 0:
        raise DimensionError(f"conv_transpose2d: output size {ho}x{wo} is not positive")
    full = _scatter(x.data, w.data, stride, hf, wf)
    out = np.ascontiguousarray(full[:, :, pad:pad + ho, pad:pad + wo])
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def rule(g):
        gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, pad:pad + ho, pad:pad + wo] = g
        gx = gw = gb = None
        if x.requires_grad:
            gx = _gather(gfull, w.data, stride, h, wd)
        if w.requires_grad:
            gw = _kernel_grad(gfull, x.data, stride, kh, kw)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, "conv_transpose2d", inputs, rule)


def maxpool2d(x: Tensor, size: int, stride: int, pad: int = 0) -> Tensor:
    """Max over ``size``x``size`` windows.  Padding is -inf; the gradient
    goes to the first maximal element in row-major window order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if size > hp or size > wp or stride < 1 or pad > size // 2:
        raise DimensionError(f"maxpool2d: window {size} / pad {pad} invalid for {x.shape}")
    ho, wo = (hp - size) // stride + 1, (wp - size) // stride + 1
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    else:
        xp = x.data
    best = None
    arg = np.zeros((n, c, ho, wo), dtype=np.int16)
    for k, (i, j) in enumerate(itertools.product(range(size), range(size))):
        patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
        if best is None:
            best = patch.copy()
            continue
        better = patch > best
        best[better] = patch[better]
        arg[better] = k

    def rule(g):
        gp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for k, (i, j) in enumerate(itertools.product(range(size), range(size))):
            gp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == k)
        return (gp[:, :, pad:pad + h, pad:pad + w],)

    return _record(best, "maxpool2d", (x,), rule)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    """Per-channel batch normalisation of (N,C,H,W).

    In training mode the batch statistics are used and the running
    statistics are updated in place (unbiased variance, momentum
    ``state.momentum``); otherwise the running statistics are used.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine params must be ({c},)")
    m = n * h * w
    shape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        unbiased = var * m / max(m - 1, 1)
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(np.float32)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(np.float32)
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(shape)) * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def rule(g):
        ggamma = np.sum(g * xhat, axis=(0, 2, 3))
        gbeta = np.sum(g, axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (invstd.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * np.sum(gxhat * xhat, axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * invstd.reshape(shape)
        return gx, ggamma, gbeta

    return _record(out.astype(x.dtype, copy=False), "batchnorm2d", (x, gamma, beta), rule)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean smooth-L1: 0.5*d**2 where |d| < 1, |d| - 0.5 elsewhere, d = pred - target."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape("smooth_l1", pred, target)
    diff = pred.data - target.data
    adiff = np.abs(diff)
    small = adiff < 1
    z = np.where(small, 0.5 * diff * diff, adiff - 0.5)
    n = diff.size
    value = np.asarray(z.sum(dtype=np.float64) / n, dtype=pred.dtype).reshape(())

    def rule(g):
        d = np.where(small, diff, np.sign(diff)) * (g / n)
        return d, -d

    return _record(value, "smooth_l1", (pred, target), rule)


# ----------------------------------------------------------------------------
# finite differences


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, index: tuple, eps: float = 1e-3) -> float:
    """Central difference of the scalar ``fn()`` with respect to ``t.data[index]``."""
    orig = t.data[index].copy()
    with no_grad():
        t.data[index] = orig + eps
        fp = float(fn().data)
        t.data[index] = orig - eps
        fm = float(fn().data)
    t.data[index] = orig
    return (fp - fm) / (2 * eps)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
