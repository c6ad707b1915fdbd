"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Outside a tape every op is a plain
numpy computation, which is what inference uses.

    >>> w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> tape.backward(loss)["w"]
    array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations.

    Each record is ``(output, inputs, vjp)`` where ``vjp`` maps the gradient
    of the output to a tuple of input gradients (``None`` where an input needs
    none).  Records are appended in execution order, so they are already
    topologically sorted.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
        return backward(self, loss, params)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    track = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._leaf = False
        _TAPES[-1].records.append((out, inputs, vjp))
    return out


def no_tape_active() -> bool:
    return not _TAPES


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse from a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires a gradient (overwriting, never
    accumulating across calls) and returns ``{name: grad}`` for named leaves.
    Leaves in ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if t._leaf:
                leaves[k] = t
            prev = grads.get(k)
            grads[k] = gi if prev is None else prev + gi
    if loss._leaf and loss.requires_grad:
        leaves[id(loss)] = loss

    result: dict[str, np.ndarray] = {}
    everything = list(leaves.values())
    if params is not None:
        everything += [p for p in params if id(p) not in leaves]
    for t in everything:
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        if t.name is not None:
            result[t.name] = t.grad
    return result


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def log10(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log10(a.data), (a,), lambda g: (g / (a.data * np.log(10.0)),))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _record(out, (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ------------------------------------------------------------------ reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ------------------------------------------------------------------ structural

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[index] += g
        return (out,)

    return _record(a.data[index], (a,), vjp)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _record(np.take(a.data, indices, axis=axis), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad_right(a, total: int) -> Tensor:
    """Zero-pad (or trim) the last axis to length ``total``."""
    a = as_tensor(a)
    n = a.shape[-1]
    if total == n:
        return a
    if total < n:
        return getitem(a, (..., slice(0, total)))
    width = [(0, 0)] * (a.ndim - 1) + [(0, total - n)]
    return _record(np.pad(a.data, width), (a,), lambda g: (g[..., :n],))


def repeat_time(v, frames: int) -> Tensor:
    """Tile a D×1 column across ``frames`` time steps."""
    v = as_tensor(v)
    return _record(np.repeat(v.data, frames, axis=1), (v,),
                   lambda g: (g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), vjp)


def affine(x, weight, bias) -> Tensor:
    """``weight @ x + bias`` for a single vector ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape != (weight.shape[1],) or bias.shape != (weight.shape[0],):
        raise ValueError(f"affine shape mismatch: W{weight.shape} x{x.shape} b{bias.shape}")
    return _record(weight.data @ x.data + bias.data, (x, weight, bias),
                   lambda g: (weight.data.T @ g, np.outer(g, x.data), g))


def conv1x1(x, weight, bias) -> Tensor:
    """Pointwise convolution over a C_in×T map: ``weight @ x + bias[:, None]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.shape[1] != x.shape[0]:
        raise ValueError(f"conv1x1 expects {weight.shape[1]} input channels, got {x.shape[0]}")
    return _record(weight.data @ x.data + bias.data[:, None], (x, weight, bias),
                   lambda g: (weight.data.T @ g, g @ x.data.T, g.sum(axis=1)))


# ------------------------------------------------------------------ convolution

def _overlap_add(frames: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Sum ``frames[..., k, l]`` into position ``k*stride + l`` of the last axis."""
    *lead, n_frames, width = frames.shape
    out = np.zeros((*lead, length))
    stop = stride * (n_frames - 1) + 1
    for l in range(width):
        out[..., l:l + stop:stride] += frames[..., l]
    return out


def frame(a, width: int, hop: int) -> Tensor:
    """Slice the last axis into overlapping windows: (..., T) -> (..., K, width)."""
    a = as_tensor(a)
    n = a.shape[-1]
    if n < width:
        raise ValueError(f"signal of length {n} is shorter than window {width}")
    view = sliding_window_view(a.data, width, axis=-1)[..., ::hop, :]
    return _record(np.ascontiguousarray(view), (a,),
                   lambda g: (_overlap_add(g, hop, n),))


def conv1d(x, filters, stride: int = 1) -> Tensor:
    """Strided cross-correlation: out[c, k] = sum_{j,l} filters[c,j,l] * x[j, k*stride + l]."""
    x, filters = as_tensor(x), as_tensor(filters)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_out, c_in, width = filters.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ValueError(f"conv1d expects {c_in} input channels, got shape {x.shape}")
    n = x.shape[1]
    if n < width:
        raise ValueError(f"input length {n} shorter than kernel {width}")
    frames = sliding_window_view(x.data, width, axis=1)[:, ::stride, :]  # C_in × K × L
    n_frames = frames.shape[1]
    cols = frames.transpose(1, 0, 2).reshape(n_frames, c_in * width)
    w2 = filters.data.reshape(c_out, c_in * width)

    def vjp(g):
        g_cols = g.T @ w2  # K × (C_in·L)
        g_frames = g_cols.reshape(n_frames, c_in, width).transpose(1, 0, 2)
        return _overlap_add(g_frames, stride, n), (g @ cols).reshape(filters.shape)

    return _record(w2 @ cols.T, (x, filters), vjp)


def conv_transpose1d(x, basis, stride: int = 1) -> Tensor:
    """Overlap-add synthesis: out[k*stride + l] += sum_c x[c, k] * basis[c, l]."""
    x, basis = as_tensor(x), as_tensor(basis)
    if x.data.size == 0:
        raise ValueError("conv_transpose1d got an empty input")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_in, n_frames = x.shape
    if basis.shape[0] != c_in:
        raise ValueError(f"basis has {basis.shape[0]} rows, input has {c_in} channels")
    width = basis.shape[1]
    length = (n_frames - 1) * stride + width
    frames = x.data.T @ basis.data  # K × L

    def vjp(g):
        g_frames = sliding_window_view(g[0], width)[::stride]  # K × L
        return basis.data @ g_frames.T, x.data @ g_frames

    return _record(_overlap_add(frames, stride, length)[None, :], (x, basis), vjp)


def depthwise_conv1d(x, filters, dilation: int = 1) -> Tensor:
    """Per-channel dilated convolution with symmetric zero padding (same length)."""
    x, filters = as_tensor(x), as_tensor(filters)
    if dilation <= 0:
        raise ValueError("dilation must be positive")
    channels, n = x.shape
    if filters.shape[0] != channels:
        raise ValueError(f"{filters.shape[0]} filters for {channels} channels")
    taps = filters.shape[1]
    total = dilation * (taps - 1)
    left = total // 2
    xp = np.pad(x.data, ((0, 0), (left, total - left)))
    out = np.zeros_like(x.data)
    for q in range(taps):
        out += filters.data[:, q:q + 1] * xp[:, q * dilation:q * dilation + n]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gf = np.empty_like(filters.data)
        for q in range(taps):
            seg = slice(q * dilation, q * dilation + n)
            gxp[:, seg] += filters.data[:, q:q + 1] * g
            gf[:, q] = (g * xp[:, seg]).sum(axis=1)
        return gxp[:, left:left + n], gf

    return _record(out, (x, filters), vjp)


# --------------------------------------------------------------- normalization

NORM_EPS = 1e-8


def _norm(x, gain, bias, axis):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    floored = var < NORM_EPS
    inv = 1.0 / np.sqrt(np.maximum(var, NORM_EPS))
    xhat = xc * inv
    out = gain.data[:, None] * xhat + bias.data[:, None]

    def vjp(g):
        gx_hat = g * gain.data[:, None]
        m1 = gx_hat.mean(axis=axis, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=axis, keepdims=True)
        gx = inv * (gx_hat - m1 - np.where(floored, 0.0, xhat * m2))
        return gx, (g * xhat).sum(axis=1), g.sum(axis=1)

    return _record(out, (x, gain, bias), vjp)


def channel_layer_norm(x, gain, bias) -> Tensor:
    """Normalize each time step over the channel axis, then apply gain/bias per channel."""
    return _norm(x, gain, bias, axis=0)


def global_layer_norm(x, gain, bias) -> Tensor:
    """Normalize over all C·T entries jointly, then apply gain/bias per channel."""
    return _norm(x, gain, bias, axis=None)


# --------------------------------------------------------------------- pooling

def pool(x, kind: str) -> Tensor:
    """``mean``: average over time to C×1.  ``max3``: kernel 3, stride 3."""
    x = as_tensor(x)
    if kind == "mean":
        return mean(x, axis=1, keepdims=True)
    if kind != "max3":
        raise ValueError(f"unknown pooling {kind!r}")
    channels, n = x.shape
    if n < 3:
        raise ValueError(f"max3 pooling needs at least 3 frames, got {n}")
    k = n // 3
    windows = x.data[:, :3 * k].reshape(channels, k, 3)
    arg = windows.argmax(axis=2)

    def vjp(g):
        gw = np.zeros((channels, k, 3))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=2)
        out = np.zeros_like(x.data)
        out[:, :3 * k] = gw.reshape(channels, 3 * k)
        return (out,)

    return _record(np.take_along_axis(windows, arg[..., None], axis=2)[..., 0], (x,), vjp)


# -------------------------------------------------------------------- checking

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], perturbation: float = 1e-6,
               max_elements: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest elementwise relative error between tape and central-difference gradients.

    ``fn`` maps the input tensors to a scalar.  The relative error of an
    element is ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_elements`` only a
    random subset of coordinates per input is probed.
    """
    if not 1e-7 <= perturbation <= 1e-4:
        raise ValueError("perturbation must lie in [1e-7, 1e-4]")
    for t in inputs:
        t.requires_grad = True
        t.data = np.ascontiguousarray(t.data)
    with Tape() as tape:
        loss = fn(*inputs)
    backward(tape, loss, inputs)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + perturbation
            up = float(fn(*inputs).data)
            flat[i] = orig - perturbation
            down = float(fn(*inputs).data)
            flat[i] = orig
            num = (up - down) / (2 * perturbation)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
