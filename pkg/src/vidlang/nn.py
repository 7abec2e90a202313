"""Reusable neural layers on top of the tensor engine.

Layer-normalized LSTM cells (optionally stacked), a bidirectional
runner, inverted dropout, embedding lookup, maxout, count-sketch
compact bilinear pooling, Xavier initialization, and the single-file
checkpoint format used to persist named parameter sets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, UsageError
from .tensor import Tensor

LAYER_NORM_EPS = 1e-5


def _rng_of(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def seedseq_of(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def xavier_init(shape, seed) -> Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for a 2-d shape."""
    if len(shape) != 2:
        raise UsageError(f"xavier_init expects a 2-d shape, got {shape}")
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    data = _rng_of(seed).uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True)


def xavier_conv_init(kh: int, kw: int, c_in: int, c_out: int, seed) -> Tensor:
    """Xavier for conv kernels, fans counted over receptive field x channels."""
    flat = xavier_init((kh * kw * c_in, c_out), seed)
    return Tensor(flat.data.reshape(kh, kw, c_in, c_out), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmCell:
    """One layer of gate parameters. Gate order along the 4H axis: i, f, o, g."""

    w_in: Tensor      # (input_size, 4H)
    w_rec: Tensor     # (H, 4H)
    bias: Tensor      # (4H,)
    ln_gain_x: Tensor
    ln_bias_x: Tensor
    ln_gain_h: Tensor
    ln_bias_h: Tensor
    hidden_size: int
    use_layer_norm: bool


@dataclass
class LstmParams:
    """A stack of LSTM cells; layer l >= 1 consumes layer l-1's hidden state."""

    cells: list[LstmCell]
    input_size: int
    hidden_size: int
    depth: int

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, c in enumerate(self.cells):
            p = f"{prefix}.l{i}"
            out[f"{p}.w_in"] = c.w_in
            out[f"{p}.w_rec"] = c.w_rec
            out[f"{p}.bias"] = c.bias
            if c.use_layer_norm:
                out[f"{p}.ln_gain_x"] = c.ln_gain_x
                out[f"{p}.ln_bias_x"] = c.ln_bias_x
                out[f"{p}.ln_gain_h"] = c.ln_gain_h
                out[f"{p}.ln_bias_h"] = c.ln_bias_h
        return out


def make_lstm(
    input_size: int,
    hidden_size: int,
    seed,
    depth: int = 1,
    layer_norm: bool = True,
    forget_bias: float = 1.0,
) -> LstmParams:
    seq = seedseq_of(seed)
    children = seq.generate_state(2 * depth).tolist()
    cells = []
    for layer in range(depth):
        in_size = input_size if layer == 0 else hidden_size
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size : 2 * hidden_size] = forget_bias
        cells.append(
            LstmCell(
                w_in=xavier_init((in_size, 4 * hidden_size), children[2 * layer]),
                w_rec=xavier_init((hidden_size, 4 * hidden_size), children[2 * layer + 1]),
                bias=Tensor(bias, requires_grad=True),
                ln_gain_x=Tensor(np.ones(4 * hidden_size), requires_grad=True),
                ln_bias_x=zeros_param(4 * hidden_size),
                ln_gain_h=Tensor(np.ones(4 * hidden_size), requires_grad=True),
                ln_bias_h=zeros_param(4 * hidden_size),
                hidden_size=hidden_size,
                use_layer_norm=layer_norm,
            )
        )
    return LstmParams(cells, input_size, hidden_size, depth)


def _blockwise_norm(z: Tensor, hidden: int, collect: list | None) -> Tensor:
    """Layer-normalize each of the 4 gate blocks of a (..., 4H) tensor."""
    normed = T.block_layer_norm(z, 4, eps=LAYER_NORM_EPS)
    if collect is not None:
        collect.append(T.reshape(normed, z.shape[:-1] + (4, hidden)))
    return normed


def _cell_step(cell: LstmCell, x: Tensor, h_prev: Tensor, c_prev: Tensor, collect=None):
    if x.shape[-1] != cell.w_in.shape[0]:
        raise DimensionError(
            f"lstm input width {x.shape[-1]} does not match weights {cell.w_in.shape}"
        )
    hs = cell.hidden_size
    zx = T.matmul(x, cell.w_in)
    zh = T.matmul(h_prev, cell.w_rec)
    if cell.use_layer_norm:
        zx = T.rows_affine(_blockwise_norm(zx, hs, collect), cell.ln_gain_x, cell.ln_bias_x)
        zh = T.rows_affine(_blockwise_norm(zh, hs, collect), cell.ln_gain_h, cell.ln_bias_h)
    z = T.add_rows(T.add(zx, zh), cell.bias)
    gate_i = T.sigmoid(T.slice_cols(z, 0, hs))
    gate_f = T.sigmoid(T.slice_cols(z, hs, 2 * hs))
    gate_o = T.sigmoid(T.slice_cols(z, 2 * hs, 3 * hs))
    cand = T.tanh(T.slice_cols(z, 3 * hs, 4 * hs))
    c = T.add(T.mul(gate_f, c_prev), T.mul(gate_i, cand))
    h = T.mul(gate_o, T.tanh(c))
    return h, c


@dataclass
class LstmState:
    """Per-layer hidden and cell tensors."""

    h: list[Tensor]
    c: list[Tensor]

    @property
    def top(self) -> Tensor:
        return self.h[-1]


def initial_state(params: LstmParams, batch: int | None = None, h0: Tensor | None = None) -> LstmState:
    """Zero state, optionally with every layer's hidden wired to ``h0``."""
    shape = (params.hidden_size,) if batch is None else (batch, params.hidden_size)
    hs, cs = [], []
    for _ in range(params.depth):
        if h0 is not None:
            hs.append(h0 if h0.shape == shape else T.broadcast_to(h0, shape))
        else:
            hs.append(Tensor(np.zeros(shape)))
        cs.append(Tensor(np.zeros(shape)))
    return LstmState(hs, cs)


def lstm_step(
    params: LstmParams,
    x: Tensor,
    state: LstmState,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    collect=None,
) -> LstmState:
    """One step through the stack; dropout sits between layers when training."""
    hs, cs = [], []
    inp = x
    for layer, cell in enumerate(params.cells):
        if layer > 0 and dropout_rate > 0.0:
            inp = dropout_apply(inp, dropout_rate, training, rng)
        h, c = _cell_step(cell, inp, state.h[layer], state.c[layer], collect)
        hs.append(h)
        cs.append(c)
        inp = h
    return LstmState(hs, cs)


def blstm_run(
    fwd: LstmParams,
    bwd: LstmParams,
    inputs: list[Tensor],
    h0_fwd: LstmState,
    h0_bwd: LstmState,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[list[Tensor], list[Tensor]]:
    """Forward states left to right, backward states right to left.

    Returns the top-layer hidden state lists, each of length len(inputs).
    """
    if not inputs:
        raise UsageError("blstm_run requires a non-empty sequence")
    h_f: list[Tensor] = []
    state = h0_fwd
    for x in inputs:
        state = lstm_step(fwd, x, state, training, dropout_rate, rng)
        h_f.append(state.top)
    h_b: list[Tensor] = [None] * len(inputs)  # type: ignore[list-item]
    state = h0_bwd
    for t in range(len(inputs) - 1, -1, -1):
        state = lstm_step(bwd, inputs[t], state, training, dropout_rate, rng)
        h_b[t] = state.top
    return h_f, h_b


# ---------------------------------------------------------------------------
# dropout / embedding / maxout


def dropout_apply(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout needs an rng or seed")
    gen = _rng_of(rng)
    mask = (gen.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, Tensor(mask, dtype=x.dtype))


def embed_lookup(matrix: Tensor, ids) -> Tensor:
    """Rows of shape (len(ids), d) gathered from a (d, vocab) embedding matrix."""
    return T.take_columns(matrix, ids)


@dataclass
class MaxoutParams:
    pieces: list[tuple[Tensor, Tensor]]  # (weight (d_in, d_out), bias (d_out,))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.pieces):
            out[f"{prefix}.p{i}.w"] = w
            out[f"{prefix}.p{i}.b"] = b
        return out


def make_maxout(d_in: int, d_out: int, k: int, seed) -> MaxoutParams:
    if k < 2:
        raise UsageError(f"maxout needs at least 2 pieces, got {k}")
    children = seedseq_of(seed).generate_state(k).tolist()
    return MaxoutParams(
        [(xavier_init((d_in, d_out), s), zeros_param(d_out)) for s in children]
    )


def maxout(x: Tensor, params: MaxoutParams) -> Tensor:
    """Elementwise max over affine pieces; ties go to the earliest piece."""
    if len(params.pieces) < 2:
        raise UsageError("maxout needs at least 2 pieces")
    outs = [T.add(T.matmul(x, w), b) for w, b in params.pieces]
    best = outs[0]
    for nxt in outs[1:]:
        best = T.maximum(best, nxt)
    return best


# ---------------------------------------------------------------------------
# compact bilinear pooling


@dataclass
class SketchParams:
    """Fixed (never trained) count-sketch hashes and signs for two modalities."""

    h1: np.ndarray
    s1: np.ndarray
    h2: np.ndarray
    s2: np.ndarray
    d_out: int


def make_sketch(da: int, db: int, d_out: int, seed) -> SketchParams:
    gen = _rng_of(seed)
    return SketchParams(
        h1=gen.integers(0, d_out, size=da),
        s1=gen.integers(0, 2, size=da) * 2 - 1,
        h2=gen.integers(0, d_out, size=db),
        s2=gen.integers(0, 2, size=db) * 2 - 1,
        d_out=d_out,
    )


def count_sketch(x: Tensor, h: np.ndarray, s: np.ndarray, d_out: int) -> Tensor:
    """Project a vector to d_out buckets with signed scatter-add."""
    if x.ndim != 1 or x.shape[0] != len(h):
        raise DimensionError(f"count_sketch: input shape {x.shape} vs {len(h)} hashes")
    if len(h) and (h.min() < 0 or h.max() >= d_out):
        raise DimensionError("count_sketch: hash index out of range")
    y = np.zeros(d_out, dtype=x.data.dtype)
    np.add.at(y, h, s * x.data)

    def bwd(g):
        return (g[h] * s,)

    return T.record(y, [x], bwd, "count_sketch")


def compact_bilinear(a: Tensor, b: Tensor, sk: SketchParams) -> Tensor:
    """Count-sketch both inputs, then combine by circular convolution.

    Approximates the projection of the flattened outer product of a and b.
    """
    sa = count_sketch(a, sk.h1, sk.s1, sk.d_out)
    sb = count_sketch(b, sk.h2, sk.s2, sk.d_out)
    return T.fft_pair_convolve(sa, sb)


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"CTSN"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    """Single-file checkpoint: header then per-tensor name/rank/extents/f32 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            for extent in t.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(n: int, offset: int):
        if offset + n > len(blob):
            raise FormatError("truncated checkpoint", offset=offset)
        return blob[offset : offset + n], offset + n

    chunk, off = need(4, 0)
    if chunk != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {chunk!r}", offset=0)
    chunk, off = need(8, off)
    version, count = struct.unpack("<II", chunk)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, off = need(4, off)
        (name_len,) = struct.unpack("<I", chunk)
        chunk, off = need(name_len, off)
        name = chunk.decode("utf-8")
        chunk, off = need(4, off)
        (rank,) = struct.unpack("<I", chunk)
        chunk, off = need(8 * rank, off)
        extents = struct.unpack(f"<{rank}Q", chunk) if rank else ()
        n_values = int(np.prod(extents)) if extents else 1
        chunk, off = need(4 * n_values, off)
        out[name] = np.frombuffer(chunk, dtype="<f4").reshape(extents).copy()
    if off != len(blob):
        raise FormatError("trailing bytes after last tensor", offset=off)
    return out


def load_into(params: dict[str, Tensor], path, subset: bool = False) -> None:
    """Assign checkpoint values into live parameter tensors by name.

    With subset=True only the names present in ``params`` are required to
    exist in the file (used for detector transfer).
    """
    loaded = load_checkpoint(path)
    for name, t in params.items():
        if name not in loaded:
            if subset:
                continue
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        value = loaded[name]
        if value.shape != t.shape:
            raise DimensionError(
                f"checkpoint tensor {name!r} has shape {value.shape}, expected {t.shape}"
            )
        t.data = value.astype(t.data.dtype)
