"""Dense float tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a record (inputs, output, backward
rule) to the tape of the current thread. :func:`backward` replays that tape
in reverse once, hands accumulated gradients to the leaves and clears it.

Values are 32-bit floats. :func:`default_dtype` can temporarily switch new
tensors to float64, which the finite-difference oracle uses; the backward
rules themselves are dtype agnostic.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "zeros", "ones", "no_grad",
    "default_dtype", "get_tape", "backward", "add", "sub", "mul", "div",
    "matmul", "linear", "conv2d", "conv2d_nhwc", "layer_norm", "softmax", "gelu", "reshape",
    "permute", "concat", "roll", "pad", "take", "tsum", "tmean", "tabs",
    "tsqrt", "texp", "dense", "attention_core",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Record:
    __slots__ = ("name", "inputs", "output", "rule")

    def __init__(self, name, inputs, output, rule):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered operation records of one execution context."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        for rec in self.records:
            rec.output._recorded = False
        self.records = []


_local = threading.local()


def _ctx():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
        _local.dtype = np.float32
    return _local


def get_tape() -> Tape:
    return _ctx().tape


@contextmanager
def no_grad():
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


@contextmanager
def default_dtype(dtype):
    ctx = _ctx()
    prev = ctx.dtype
    ctx.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        ctx.dtype = prev


class Tensor:
    """N-dimensional array node.

    ``data`` is a numpy array; ``grad`` is filled by :func:`backward` for
    leaves created with ``requires_grad=True``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _ctx().dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._recorded = False
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._recorded

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self, inputs: Sequence["Tensor"] | None = None):
        backward(self, inputs)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def abs(self):
        return tabs(self)

    def sqrt(self):
        return tsqrt(self)

    def exp(self):
        return texp(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_ctx().dtype), requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_ctx().dtype), requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(name: str, data: np.ndarray, inputs: tuple, rule: Callable) -> Tensor:
    ctx = _ctx()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    track = ctx.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out._recorded = track
    if track:
        ctx.tape.records.append(Record(name, inputs, out, rule))
    return out


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None):
    """Replay the tape in reverse and accumulate gradients into leaves.

    Every leaf that requires grad and appears on the tape (or in ``inputs``)
    receives a gradient, zeros when no path to ``loss`` exists. The tape is
    cleared afterwards, so a second call without a new forward pass fails.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if loss._consumed:
        raise RuntimeError("backward already ran for this loss; run the forward pass again")
    if not loss._recorded:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            loss._consumed = True
            return
        raise RuntimeError("loss is not connected to any recorded operation (empty tape)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for t in inputs or ():
        if t.requires_grad and not t._recorded:
            leaves[id(t)] = t
    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad and not t._recorded:
                leaves[id(t)] = t
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.rule(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.array(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.clear()
    loss._consumed = True


# ---------------------------------------------------------------- elementwise

def _lastsum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims; a GEMV is much faster than ufunc.reduce here."""
    n = a.shape[-1]
    return (a.reshape(-1, n) @ np.ones(n, dtype=a.dtype)).reshape(a.shape[:-1] + (1,))


def _lastmean(a: np.ndarray) -> np.ndarray:
    return _lastsum(a) * (1.0 / a.shape[-1])


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _binary(name, a, b, fwd, rule):
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_broadcast(name, a, b)
    return _make(name, fwd(a.data, b.data), (a, b), rule(a, b))


def add(a, b) -> Tensor:
    def rule(a, b):
        return lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                          _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _binary("add", a, b, np.add, rule)


def sub(a, b) -> Tensor:
    def rule(a, b):
        return lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                          _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _binary("sub", a, b, np.subtract, rule)


def mul(a, b) -> Tensor:
    def rule(a, b):
        return lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                          _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _binary("mul", a, b, np.multiply, rule)


def div(a, b) -> Tensor:
    def rule(a, b):
        def back(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb
        return back
    return _binary("div", a, b, np.divide, rule)


def tabs(x: Tensor) -> Tensor:
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def tsqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + _GELU_A * x2)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * d,)
    return _make("gelu", y, (x,), back)


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)
    return _make("sum", np.asarray(y), (x,), back)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)
    return _make("mean", np.asarray(y, dtype=x.dtype), (x,), back)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _make("matmul", y, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with w stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """[N, Hp, Wp, C] -> [N*ho*wo, kh*kw*C] patch matrix (channels fastest)."""
    n, c = xp.shape[0], xp.shape[3]
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(xp[:, :ho, :wo, :]).reshape(-1, c)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _pad_hw(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if not (ph or pw):
        return a
    return np.pad(a, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def conv2d_nhwc(x: Tensor, w: Tensor, bias: Tensor | None = None, padding="same",
                padding_mode: str = "zeros") -> Tensor:
    """Channels-last convolution: ``x`` [N,H,W,C], ``w`` [O,C,kh,kw] -> [N,H',W',O].

    Same arithmetic as :func:`conv2d`; this is the layout the network runs in.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {cw} (input {x.shape}, kernel {w.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding in ("valid", 0):
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if padding_mode not in ("zeros", "reflect"):
        raise ValueError(f"unknown padding_mode {padding_mode!r}")
    if padding_mode == "reflect" and (ph or pw):
        x = pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="reflect")
        ph = pw = 0
        n, h, wd, c = x.shape
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    cols = _im2col(_pad_hw(x.data, ph, pw), kh, kw, ho, wo)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(-1, o)
    y = cols @ wmat
    if bias is not None:
        y += bias.data
    y = y.reshape(n, ho, wo, o)
    inputs = (x, w) if bias is None else (x, w, bias)

    def back(g):
        g2 = g.reshape(-1, o)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            # full correlation of the output gradient with the flipped kernel
            gcols = _im2col(_pad_hw(g, kh - 1 - ph, kw - 1 - pw), kh, kw, h, wd)
            wflip = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, c)
            gx = (gcols @ wflip).reshape(n, h, wd, c)
        return (gx, gw) if bias is None else (gx, gw, gb)
    return _make("conv2d", y, inputs, back)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding="same",
           padding_mode: str = "zeros") -> Tensor:
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``w`` [O,C,kh,kw].

    ``padding="same"`` keeps H and W; the border is zero filled unless
    ``padding_mode="reflect"``. ``padding="valid"`` (or 0) pads nothing.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels but kernel expects {w.shape[1]} "
                         f"(input {x.shape}, kernel {w.shape})")
    y = conv2d_nhwc(permute(x, (0, 2, 3, 1)), w, bias, padding, padding_mode)
    return permute(y, (0, 3, 1, 2))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match last axis {d}")
    xd = x.data
    mu = _lastmean(xd)
    xc = xd - mu
    var = _lastmean(xc * xc)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        gx = gg = gbeta = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - _lastmean(gh) - xhat * _lastmean(gh * xhat))
        return gx, gg, gbeta
    return _make("layer_norm", y, (x, gamma, beta), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction, so large inputs stay finite."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make("softmax", y, (x,), back)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)
    return _make("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort([a % x.ndim for a in axes])
    return _make("permute", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    y = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def back(g):
        out = []
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(out)
    return _make("concat", y, tuple(xs), back)


def _getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]
    basic = not _is_fancy(index)
    if basic:
        y = y.copy()

    def back(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)
    return _make("getitem", y, (x,), back)


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def roll(x: Tensor, shifts, axes) -> Tensor:
    """Cyclic shift, same semantics as ``numpy.roll``."""
    shifts = tuple(shifts) if isinstance(shifts, (tuple, list)) else (shifts,)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    y = np.roll(x.data, shifts, axes)
    neg = tuple(-s for s in shifts)
    return _make("roll", y, (x,), lambda g: (np.roll(g, neg, axes),))


def _reflect_index(n, before, after):
    idx = np.arange(-before, n + after)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period if period else np.zeros_like(idx)
    return np.where(idx >= n, period - idx, idx)


def pad(x: Tensor, widths, mode: str = "constant") -> Tensor:
    """Pad with zeros (``"constant"``) or mirror without edge repeat (``"reflect"``)."""
    widths = tuple(tuple(int(v) for v in w) for w in widths)
    if len(widths) != x.ndim:
        raise ShapeError(f"pad: {len(widths)} width pairs for a {x.ndim}-D tensor")
    if mode == "reflect":
        for n, (lo, hi) in zip(x.shape, widths):
            if (lo or hi) and max(lo, hi) >= n:
                raise ShapeError(f"reflect pad of ({lo},{hi}) needs an extent > {max(lo, hi)}, got {n}")
    elif mode != "constant":
        raise ValueError(f"unknown pad mode {mode!r}")
    y = np.pad(x.data, widths, mode=mode)

    def back(g):
        if mode == "constant":
            sl = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(widths))
            return (g[sl],)
        for axis, (lo, hi) in enumerate(widths):
            if not (lo or hi):
                continue
            n = x.shape[axis]
            idx = _reflect_index(n, lo, hi)
            shape = list(g.shape)
            shape[axis] = n
            acc = np.zeros(shape, dtype=g.dtype)
            sel = (slice(None),) * axis + (idx,)
            np.add.at(acc, sel, g)
            g = acc
        return (g,)
    return _make("pad", y, (x,), back)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (axis 0); gradients scatter-add back."""
    index = np.asarray(index)
    y = table.data[index]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)
    return _make("take", y, (table,), back)


# ---------------------------------------------------------------- fused kernels

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] + b as one tape record (flattens leading axes)."""
    k, n = w.shape
    if x.shape[-1] != k:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    y = x2 @ w.data
    if b is not None:
        y += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)
    return _make("dense", y.reshape(lead + (n,)), inputs, back)


def attention_core(qkv: Tensor, num_heads: int, bias: Tensor | None = None,
                   mask: np.ndarray | None = None) -> Tensor:
    """Multi-head softmax(q k^T / sqrt(d) + bias + mask) v for packed ``qkv`` [B, L, 3C].

    ``bias`` is [heads, L, L]; ``mask`` is a constant [nW, L, L] added to
    every group of nW consecutive windows. Returns [B, L, C] with heads
    concatenated along the last axis.
    """
    bsz, l, c3 = qkv.shape
    c = c3 // 3
    d = c // num_heads
    scale = d ** -0.5
    parts = qkv.data.reshape(bsz, l, 3, num_heads, d).transpose(2, 0, 3, 1, 4)
    q = np.ascontiguousarray(parts[0]) * scale
    k = np.ascontiguousarray(parts[1])
    v = np.ascontiguousarray(parts[2])
    s = np.matmul(q, k.transpose(0, 1, 3, 2))
    if bias is not None:
        if bias.shape != (num_heads, l, l):
            raise ShapeError(f"attention bias {bias.shape} != {(num_heads, l, l)}")
        s += bias.data
    if mask is not None:
        nw = mask.shape[0]
        if mask.shape[1:] != (l, l) or bsz % nw:
            raise ShapeError(f"mask {mask.shape} does not fit {bsz} windows of {l} tokens")
        s.reshape(bsz // nw, nw, num_heads, l, l)[...] += mask[None, :, None]
    # per-matrix max is a valid shift for every row; fall back to row maxima on underflow
    raw = s.copy()
    s -= s.reshape(bsz, num_heads, l * l).max(axis=-1)[..., None, None]
    np.exp(s, out=s)
    z = _lastsum(s)
    if not (z > 1e-30).all():
        s = raw - raw.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        z = _lastsum(s)
    s /= z
    p = s
    o = np.matmul(p, v).transpose(0, 2, 1, 3).reshape(bsz, l, c)
    inputs = (qkv,) if bias is None else (qkv, bias)

    def back(g):
        go = g.reshape(bsz, l, num_heads, d).transpose(0, 2, 1, 3)
        dv = np.matmul(p.transpose(0, 1, 3, 2), go)
        dp = np.matmul(go, v.transpose(0, 1, 3, 2))
        ds = p * (dp - _lastsum(dp * p))
        dq = np.matmul(ds, k) * scale
        dk = np.matmul(ds.transpose(0, 1, 3, 2), q)
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, l, c3)
        if bias is None:
            return (dqkv,)
        return dqkv, (ds.sum(axis=0) if bias.requires_grad else None)
    return _make("attention", o, inputs, back)
