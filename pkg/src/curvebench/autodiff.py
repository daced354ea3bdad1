"""Dense float64 tensors with a reverse-mode tape.

Only the primitives needed for small MLPs/CNNs and input gradients are
provided.  Every primitive records a vector-Jacobian product on the active
:class:`Tape`; :func:`backward` replays those in reverse order.

Conventions that tests rely on:

* relu has gradient 0 at exactly 0.
* maxpool2x2 routes the gradient to the first maximum in row-major order.
* sign(0) == 0 wherever a sign is taken downstream.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tensor_op",
    "add",
    "sub",
    "scale",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "maxpool2x2",
    "flatten",
    "reshape",
    "bias_add",
    "sum_all",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class TapeError(RuntimeError):
    """Misuse of a tape: no tape, non-scalar output, or replayed tape."""


class Tensor:
    """Immutable dense array of float64 values.

    Construction from external data validates finiteness; tensors produced
    by primitives skip the check.
    """

    __slots__ = ("_data", "_tape", "__weakref__")

    def __init__(self, data, *, _trusted: bool = False):
        if _trusted:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64, copy=True)
            if arr.ndim == 0:
                arr = arr.reshape(())
            if not np.all(np.isfinite(arr)):
                raise ValueError("Tensor data contains NaN or Inf")
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self._data = arr
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        return cls(np.ascontiguousarray(arr, dtype=np.float64), _trusted=True)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self._data, threshold=8)})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


_local = threading.local()


def _active_tapes() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class _Entry:
    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out, inputs, vjp, name):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Records primitives executed inside ``with Tape() as tape:``.

    A tape belongs to the thread that opened it and supports exactly one
    backward pass.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumed = False
        self._produced: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _active_tapes()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable, name: str):
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        self.entries.append(_Entry(out, tuple(inputs), vjp, name))
        self._produced[id(out)] = out
        out._tape = self

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._produced and self._produced[id(t)] is t

    def backward(self, output: Tensor) -> dict[Tensor, Tensor]:
        """Gradient of the scalar ``output`` w.r.t. every leaf on this tape."""
        if self.consumed:
            raise TapeError("backward already run on this tape; record a new forward pass")
        if output.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        if not self.owns(output):
            raise TapeError("output was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            in_grads = entry.vjp(g)
            for inp, ig in zip(entry.inputs, in_grads):
                if ig is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if not self.owns(inp):
                    leaves[key] = inp
        return {leaves[k]: Tensor._wrap(grads[k]) for k in leaves if k in grads}


def _record(out_arr: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    out = Tensor._wrap(out_arr)
    stack = _active_tapes()
    if stack:
        stack[-1].record(out, inputs, vjp, name)
    return out


def backward(output: Tensor, tape: Tape | None = None) -> dict[Tensor, Tensor]:
    """Replay the tape that recorded ``output`` and return leaf gradients."""
    if tape is None:
        tape = output._tape
        if tape is None:
            raise TapeError("output was not recorded on a tape")
    return tape.backward(output)


# --------------------------------------------------------------------------
# primitives


def _same_shape(name: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _record(a.data * alpha, (a,), lambda g: (g * alpha,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for rank-1/rank-2 operands (numpy semantics)."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be rank 1 or 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # (m,k)@(k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # (k,)@(k,n) -> (n,)
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _record(ad @ bd, (a, b), vjp, "matmul")


def _promote_conv(x: np.ndarray, w: np.ndarray):
    squeeze = []
    if x.ndim == 2:
        x = x[None, None]
        squeeze = [0, 1]
    elif x.ndim == 3:
        x = x[None]
        squeeze = [0]
    elif x.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 2-4, got shape {x.shape}")
    if w.ndim == 2:
        w = w[None, None]
    elif w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 2 or 4, got shape {w.shape}")
    return x, w, squeeze


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw).

    Rank-3 (C,H,W) and rank-2 (H,W) inputs are accepted and returned with
    the same leading structure; a rank-2 kernel means one in/out channel.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    xd, wd, squeeze = _promote_conv(x.data, w.data)
    n, c, h, wid = xd.shape
    o, cw, kh, kw = wd.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    hp, wp = h + 2 * padding, wid + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    w_rank2 = w.ndim == 2

    def vjp(g):
        g4 = g.reshape(n, o, ho, wo)
        gw = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.tensordot(
                    g4, wd[:, :, i, j], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wid]
        gx = gx.reshape(x.shape)
        if w_rank2:
            gw = gw.reshape(kh, kw)
        return gx, gw

    if squeeze:
        out = out.reshape(out.shape[len(squeeze):]) if len(squeeze) == 1 else out[0, 0]
    return _record(out, (x, w), vjp, "conv2d")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _record(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,), "relu")


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max over the last two axes (odd edges dropped)."""
    if x.ndim < 2:
        raise ShapeError(f"maxpool2x2: need rank >= 2, got shape {x.shape}")
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2x2: spatial extent too small in {x.shape}")
    xc = x.data[..., : 2 * h2, : 2 * w2]
    blocks = xc.reshape(*lead, h2, 2, w2, 2).swapaxes(-3, -2).reshape(*lead, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gc = gb.reshape(*lead, h2, w2, 2, 2).swapaxes(-3, -2).reshape(*lead, 2 * h2, 2 * w2)
        if gc.shape == x.shape:
            return (gc,)
        full = np.zeros(x.shape)
        full[..., : 2 * h2, : 2 * w2] = gc
        return (full,)

    return _record(out, (x,), vjp, "maxpool2x2")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    """Collapse axes ``start_axis..`` into one (batch axis kept by default)."""
    if x.ndim <= start_axis:
        raise ShapeError(f"flatten: shape {x.shape} has no axes from {start_axis}")
    new = x.shape[:start_axis] + (int(np.prod(x.shape[start_axis:])),)
    return reshape(x, new)


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a rank-1 ``b`` along ``axis`` of ``x`` (the only broadcasting op)."""
    ax = axis % x.ndim
    if b.ndim != 1 or x.shape[ax] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = b.shape[0]
    others = tuple(i for i in range(x.ndim) if i != ax)
    return _record(
        x.data + b.data.reshape(bshape),
        (x, b),
        lambda g: (g, g.sum(axis=others)),
        "bias_add",
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, np.asarray(g).item()),), "sum")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if logits.ndim == 0 or logits.shape[-1] < 2:
        raise ShapeError(f"softmax: need at least 2 logits, got shape {logits.shape}")
    p = _softmax_rows(logits.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (logits,), vjp, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    if logits.ndim == 0 or logits.shape[-1] < 2:
        raise ShapeError(f"log_softmax: need at least 2 logits, got shape {logits.shape}")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (logits,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label]; for a (N,C) batch, the mean over rows."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    if z2.ndim != 2 or z2.shape[1] < 2:
        raise ShapeError(f"cross_entropy: logits must be (C,) or (N,C), got {logits.shape}")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape[0] != z2.shape[0]:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {z2.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= z2.shape[1]):
        raise IndexError(f"cross_entropy: label out of range for {z2.shape[1]} classes")
    n = z2.shape[0]
    m = z2.max(axis=1)
    # log1p keeps precision when the label already dominates
    e = np.exp(z2 - m[:, None])
    e[np.arange(n), z2.argmax(axis=1)] = 0.0
    tail = e.sum(axis=1)
    loss = float(np.mean((m - z2[np.arange(n), labels]) + np.log1p(tail)))
    p = _softmax_rows(z2)

    def vjp(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        d *= np.asarray(g).item() / n
        return (d.reshape(z.shape),)

    return _record(np.array(max(loss, 0.0)), (logits,), vjp, "cross_entropy")


_KINDS = {
    "add": add,
    "sub": sub,
    "scale": scale,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2x2": maxpool2x2,
    "flatten": flatten,
    "reshape": reshape,
    "bias_add": bias_add,
    "sum": sum_all,
}


def tensor_op(kind: str, *operands, **params) -> Tensor:
    """Dispatch a primitive by name, e.g. ``tensor_op("conv2d", x, w, stride=1)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(_KINDS)}") from None
    return fn(*operands, **params)
