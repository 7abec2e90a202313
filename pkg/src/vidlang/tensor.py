"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every model computation in this package is expressed through the ops in
this module so that gradients are exact and checkable against finite
differences. Design constraints kept deliberately tight:

* no broadcasting beyond scalars (plus the explicit ``broadcast_to`` op),
* float32 by default, float64 available for gradient checking,
* single-threaded execution per tape; independent tapes are independent.

Ops record onto the active :class:`Tape` (a ``with`` context). Tensors
created while no tape is active are leaves; ops still run but nothing is
recorded, which is the inference path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, UnsupportedError, UsageError

_state = threading.local()

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.dtype = np.float32
        _state.debug = False
    return _state


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created without an explicit dtype.

    Accepts "f32"/"f64" or the numpy dtypes themselves.
    """
    tls = _tls()
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise UsageError(f"unknown precision {dtype!r}; expected f32 or f64")
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}")
    tls.dtype = dtype


def default_dtype():
    return _tls().dtype


class precision:
    """Context manager switching the default dtype, e.g. ``with precision("f64"):``."""

    def __init__(self, dtype):
        self._dtype = dtype

    def __enter__(self):
        self._saved = default_dtype()
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def set_debug(enabled: bool) -> None:
    """Enable per-op finiteness checks (slow; meant for tests)."""
    _tls().debug = enabled


class Tensor:
    """Dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars (python numbers) are allowed; anything else
    # must be a Tensor of identical shape.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class Tape:
    """Ordered record of executed ops, in topological (execution) order.

    Backward replay visits each recorded node exactly once, in reverse.
    """

    records: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        tls = _tls()
        if tls.tape is not None:
            raise UsageError("a tape is already active on this thread")
        tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls().tape = None
        return False

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _tls().tape


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``backward_fn`` maps the output gradient to a tuple of input
    gradients (None for inputs that do not need one). This is the
    extension point custom ops outside this module use.
    """
    tls = _tls()
    if tls.debug and not np.all(np.isfinite(out_data)):
        raise DomainError(f"non-finite values produced by op {name!r}")
    out = Tensor(out_data, dtype=out_data.dtype)
    if tls.tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tls.tape.records.append(_Node(tuple(inputs), out, backward_fn, name))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grad buffers of every requires_grad tensor reachable from loss.

    Repeated calls without zeroing grads accumulate.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.records):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        if node.output.requires_grad:
            node.output.accumulate_grad(g_out)
        input_grads = node.backward_fn(g_out)
        for tensor, g in zip(node.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            seen[key] = tensor
            if key in grads:
                # Never in place: backward rules may hand out views.
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=tensor.data.dtype)
    # Whatever is left in the dict are leaves (no producing record on this tape).
    for key, g in grads.items():
        t = seen.get(key)
        if t is not None and t.requires_grad:
            t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# op helpers


def _as_scalar(x) -> float | None:
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _binary(a, b, op_name, fwd, bwd_a, bwd_b):
    """Elementwise binary op on equal shapes, or tensor-with-scalar."""
    sa, sb = _as_scalar(a), _as_scalar(b)
    if sa is not None and sb is not None:
        raise UsageError(f"{op_name}: at least one operand must be a Tensor")
    if sa is not None:
        out = fwd(sa, b.data)
        return record(out, [b], lambda g: (bwd_b(g, sa, b.data),), op_name)
    if sb is not None:
        out = fwd(a.data, sb)
        return record(out, [a], lambda g: (bwd_a(g, a.data, sb),), op_name)
    _check_same_shape(a, b, op_name)
    out = fwd(a.data, b.data)
    return record(
        out, [a, b], lambda g: (bwd_a(g, a.data, b.data), bwd_b(g, a.data, b.data)), op_name
    )


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(
        a, b, "mul", lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, [a], lambda g: (-g,), "neg")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record(y, [a], lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # Stable two-sided form; np.exp never sees a large positive argument.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype)
    return record(y, [a], lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    return record(y, [a], lambda g: (g * (a.data > 0),), "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record(y, [a], lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return record(np.log(a.data), [a], lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root with sqrt(0) = 0 and a zero subgradient there.

    The zero rule keeps losses built on x**0.5 finite at the boundary.
    """
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(a.data)

    def bwd(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return record(y, [a], bwd, "sqrt")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero strictly outside the interval."""
    y = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return record(y, [a], lambda g: (g * inside,), "clip")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    _check_same_shape(a, b, "maximum")
    a_wins = a.data >= b.data
    y = np.where(a_wins, a.data, b.data)
    return record(y, [a, b], lambda g: (g * a_wins, g * ~a_wins), "maximum")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over 1-d/2-d operands (vectors contract naturally)."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-d/2-d operands, got {ad.shape} @ {bd.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"matmul: inner extents differ, {ad.shape} @ {bd.shape}")
    y = ad @ bd

    def bwd(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad  # both 1-d, scalar output

    return record(np.asarray(y), [a, b], bwd, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return record(y, [a], bwd, "softmax")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything when axis is None."""
    if axis is None:
        y = np.asarray(a.data.sum())
        return record(y, [a], lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    y = a.data.sum(axis=axis)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record(y, [a], bwd, "sum")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    y = a.data.reshape(shape)
    return record(y, [a], lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat of empty sequence")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(sizes))
        )

    return record(y, list(tensors), bwd, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    if not tensors:
        raise UsageError("stack of empty sequence")
    y = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))

    return record(y, list(tensors), bwd, "stack")


def pick(a: Tensor, index: int) -> Tensor:
    """Select one element of a vector (or one row of a matrix)."""
    y = np.asarray(a.data[index])

    def bwd(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return record(y, [a], bwd, "pick")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a matrix (or element slice of a vector)."""
    if a.ndim not in (1, 2):
        raise DimensionError(f"slice_cols expects 1-d or 2-d, got shape {a.shape}")
    y = a.data[..., start:stop].copy()

    def bwd(g):
        out = np.zeros_like(a.data)
        out[..., start:stop] = g
        return (out,)

    return record(y, [a], bwd, "slice_cols")


def take_columns(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather columns of a (d, n) matrix as rows of a (len(indices), d) result.

    Used for embedding lookup; gradients scatter-add into the source
    columns so repeated indices accumulate.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2:
        raise DimensionError(f"take_columns expects a matrix, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise DimensionError(f"column index out of range for shape {a.shape}")
    y = a.data[:, idx].T.copy()

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out.T, idx, g)
        return (out,)

    return record(y, [a], bwd, "take_columns")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicitly broadcast a tensor whose shape is a suffix of ``shape``.

    The gradient sums over the added leading axes. This is the only
    broadcasting the engine performs beyond scalars.
    """
    shape = tuple(shape)
    k = a.ndim
    if k > len(shape) or (k and shape[len(shape) - k:] != a.shape):
        raise DimensionError(f"shape {a.shape} is not a suffix of {shape}")
    y = np.broadcast_to(a.data, shape).copy()
    lead = tuple(range(len(shape) - k))

    def bwd(g):
        return (g.sum(axis=lead) if lead else g,)

    return record(y, [a], bwd, "broadcast_to")


def rows_affine(z: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """y = z * gain + bias with 1-d gain/bias applied along the last axis."""
    if gain.shape != z.shape[-1:] or bias.shape != z.shape[-1:]:
        raise DimensionError(
            f"rows_affine: gain {gain.shape} / bias {bias.shape} vs input {z.shape}"
        )
    y = z.data * gain.data + bias.data
    lead = tuple(range(z.ndim - 1))

    def bwd(g):
        dgain = (g * z.data).sum(axis=lead) if lead else g * z.data
        dbias = g.sum(axis=lead) if lead else g
        return g * gain.data, dgain, dbias

    return record(y, [z, gain, bias], bwd, "rows_affine")


def add_rows(z: Tensor, bias: Tensor) -> Tensor:
    """y = z + bias with a 1-d bias broadcast along the last axis."""
    if bias.shape != z.shape[-1:]:
        raise DimensionError(f"add_rows: bias {bias.shape} vs input {z.shape}")
    y = z.data + bias.data
    lead = tuple(range(z.ndim - 1))

    def bwd(g):
        return g, g.sum(axis=lead) if lead else g

    return record(y, [z, bias], bwd, "add_rows")


def block_layer_norm(z: Tensor, blocks: int, eps: float = 1e-5) -> Tensor:
    """Layer-normalize each of ``blocks`` equal chunks of the last axis."""
    width = z.shape[-1]
    if width % blocks:
        raise DimensionError(f"cannot split width {width} into {blocks} blocks")
    x = z.data.reshape(z.shape[:-1] + (blocks, width // blocks))
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        gb = g.reshape(x.shape)
        gm = gb.mean(axis=-1, keepdims=True)
        gym = (gb * y).mean(axis=-1, keepdims=True)
        return ((inv * (gb - gm - y * gym)).reshape(z.shape),)

    return record(y.reshape(z.shape), [z], bwd, "block_layer_norm")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no gain/bias)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return record(y, [a], bwd, "layer_norm")


# ---------------------------------------------------------------------------
# spatial ops


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """x: (B, H, W, C), same-padded outside. Returns (B, H, W, kh*kw*C)."""
    b, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # windows: (B, H, W, C, kh, kw) -> (B, H, W, kh, kw, C)
    windows = windows.transpose(0, 1, 2, 4, 5, 3)
    return windows.reshape(b, h, w, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add window gradients back to the image."""
    b, h, w, c = shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((b, h + 2 * ph, w + 2 * pw, c), dtype=cols.dtype)
    cols = cols.reshape(b, h, w, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + h, j : j + w, :] += cols[:, :, :, i, j, :]
    return out[:, ph : ph + h, pw : pw + w, :]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 2-d cross-correlation.

    x is (H, W, Cin) or (B, H, W, Cin); kernel is (kh, kw, Cin, Cout) with
    odd spatial extents. bias, when given, is (Cout,).
    """
    kd = kernel.data
    if kd.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-d, got shape {kd.shape}")
    kh, kw, cin, cout = kd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedError(f"conv2d requires odd kernel extents, got {kh}x{kw}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-d or 4-d, got shape {x.shape}")
    if xd.shape[-1] != cin:
        raise DimensionError(
            f"conv2d: input channels {xd.shape[-1]} do not match kernel {kd.shape}"
        )
    b, h, w, _ = xd.shape
    cols = _im2col(xd, kh, kw)  # (B,H,W,kh*kw*cin)
    wmat = kd.reshape(kh * kw * cin, cout)
    y = cols.reshape(-1, kh * kw * cin) @ wmat
    y = y.reshape(b, h, w, cout)
    if bias is not None:
        y = y + bias.data
    if squeeze:
        y = y[0]

    def bwd(g):
        gb = g[None] if squeeze else g
        gflat = gb.reshape(-1, cout)
        dw = (cols.reshape(-1, kh * kw * cin).T @ gflat).reshape(kd.shape)
        dcols = gflat @ wmat.T
        dx = _col2im(dcols.reshape(b, h, w, -1), xd.shape, kh, kw)
        if squeeze:
            dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 1, 2)))
        return tuple(grads)

    inputs = [x, kernel] if bias is None else [x, kernel, bias]
    return record(y, inputs, bwd, "conv2d")


def pool2d(x: Tensor, kind: str, window: int | str = 2) -> Tensor:
    """Per-window reduction over the spatial axes of (B?, H, W, C).

    kind is "max" or "avg"; window is 2 (stride-2 2x2, odd extents
    zero-padded on the right/bottom) or "full" (whole-grid reduction to
    (B?, C)). Max ties route the gradient to the first index row-major.
    """
    if kind not in ("max", "avg"):
        raise UsageError(f"pool2d kind must be max or avg, got {kind!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"pool2d input must be 3-d or 4-d, got shape {x.shape}")
    b, h, w, c = xd.shape

    if window == "full":
        if kind == "avg":
            y = xd.mean(axis=(1, 2))

            def bwd(g):
                gb = g[None] if squeeze else g
                dx = np.broadcast_to(gb[:, None, None, :] / (h * w), xd.shape).copy()
                return (dx[0] if squeeze else dx,)

        else:
            flat = xd.reshape(b, h * w, c)
            arg = flat.argmax(axis=1)  # first max, row-major
            y = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]

            def bwd(g):
                gb = g[None] if squeeze else g
                dflat = np.zeros_like(flat)
                np.put_along_axis(dflat, arg[:, None, :], gb[:, None, :], axis=1)
                dx = dflat.reshape(xd.shape)
                return (dx[0] if squeeze else dx,)

        return record(y[0] if squeeze else y, [x], bwd, f"pool2d_{kind}_full")

    if window != 2:
        raise UsageError(f"pool2d window must be 2 or 'full', got {window!r}")
    hp, wp = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    xpad = xd
    if (hp, wp) != (h, w):
        xpad = np.pad(xd, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    win = xpad.reshape(b, hp // 2, 2, wp // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(b, hp // 2, wp // 2, 4, c)  # window cells in row-major order
    if kind == "avg":
        if h % 2 or w % 2:
            raise DimensionError(f"avg pool2d window 2 requires even extents, got {h}x{w}")
        y = win.mean(axis=3)

        def bwd(g):
            gb = g[None] if squeeze else g
            dwin = np.broadcast_to(gb[:, :, :, None, :] / 4.0, win.shape).copy()
            dx = dwin.reshape(b, hp // 2, wp // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
            dx = dx.reshape(b, hp, wp, c)[:, :h, :w, :]
            return (dx[0] if squeeze else dx.copy(),)

    else:
        arg = win.argmax(axis=3)
        y = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

        def bwd(g):
            gb = g[None] if squeeze else g
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, arg[:, :, :, None, :], gb[:, :, :, None, :], axis=3)
            dx = dwin.reshape(b, hp // 2, wp // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
            dx = dx.reshape(b, hp, wp, c)[:, :h, :w, :]
            return (dx[0] if squeeze else dx.copy(),)

    return record(y[0] if squeeze else y, [x], bwd, f"pool2d_{kind}2")


def pad_spatial(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Zero-pad the spatial axes of (B?, H, W, C) on the right/bottom."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"pad_spatial input must be 3-d or 4-d, got shape {x.shape}")
    b, h, w, c = xd.shape
    if target_h < h or target_w < w:
        raise DimensionError(f"cannot pad {h}x{w} down to {target_h}x{target_w}")
    y = np.pad(xd, ((0, 0), (0, target_h - h), (0, target_w - w), (0, 0)))

    def bwd(g):
        gb = g[None] if squeeze else g
        dx = gb[:, :h, :w, :]
        return (dx[0] if squeeze else dx,)

    return record(y[0] if squeeze else y, [x], bwd, "pad_spatial")


def fft_pair_convolve(a: Tensor, b: Tensor) -> Tensor:
    """Circular convolution of two equal-length vectors via the FFT."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"fft_pair_convolve needs equal-length vectors, got {a.shape}, {b.shape}")
    d = a.shape[0]
    fa, fb = np.fft.rfft(a.data), np.fft.rfft(b.data)
    y = np.fft.irfft(fa * fb, n=d).astype(a.data.dtype)

    def bwd(g):
        fg = np.fft.rfft(g)
        da = np.fft.irfft(fg * np.conj(fb), n=d).astype(a.data.dtype)
        db = np.fft.irfft(fg * np.conj(fa), n=d).astype(b.data.dtype)
        return da, db

    return record(y, [a, b], bwd, "fft_pair_convolve")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between autodiff and central differences."""

    per_param: dict[str, float]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self) -> str:
        lines = [
            f"  {name:40s} {err:.3e}" for name, err in sorted(self.per_param.items())
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max rel err {self.max_rel_err:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _rel_err(ad: np.ndarray, fd: np.ndarray) -> float:
    # Relative where gradients are large, absolute where they are tiny.
    denom = np.maximum(1.0, np.maximum(np.abs(ad), np.abs(fd)))
    return float(np.max(np.abs(ad - fd) / denom)) if ad.size else 0.0


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare autodiff gradients of the scalar f() against central differences.

    f must be deterministic (run any stochastic pieces, e.g. dropout, in
    inference mode); a repeated evaluation that differs bitwise raises
    UsageError. Gradients of ``params`` are overwritten.
    """
    y1 = f()
    y2 = f()
    if y1.data.size != 1:
        raise UsageError(f"grad_check expects a scalar function, got shape {y1.shape}")
    if not np.array_equal(y1.data, y2.data):
        raise UsageError("grad_check requires a deterministic function (is dropout enabled?)")

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)

    report: dict[str, float] = {}
    for name, p in params.items():
        ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        fd = np.zeros_like(p.data)
        for i in range(p.data.size):
            idx = np.unravel_index(i, p.data.shape) if p.data.ndim else ()
            saved = p.data[idx]
            p.data[idx] = saved + step
            up = f().item()
            p.data[idx] = saved - step
            down = f().item()
            p.data[idx] = saved
            fd[idx] = (up - down) / (2.0 * step)
        report[name] = _rel_err(np.asarray(ad), fd)
    return GradCheckReport(report, tolerance)
