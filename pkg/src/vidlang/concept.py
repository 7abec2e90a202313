"""Concept word detector: parallel tracing LSTMs with spatial attention.

A bank of L recurrent traces (one per grid cell) follows spatially
consistent content across frames. Each step, a trace pools the feature
grid with its current attention map, advances a shared-parameter LSTM,
and refreshes its attention from the pre-update hidden state via an
elementwise feature-hidden product scored by two small convolutions.
The concatenated final hidden states yield a per-candidate confidence
vector trained with sigmoid cross-entropy against caption words.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, tensor as T
from .config import ModelConfig
from .corpus import FeatureClip
from .errors import DimensionError, UsageError
from .tensor import Tensor

CONFIDENCE_EPS = 1e-12


@dataclass
class DetectorParams:
    reduce_kernel: Tensor   # (3, 3, C_in, channels)
    reduce_bias: Tensor
    trace_lstm: nn.LstmParams  # shared across all traces
    attn_kernel1: Tensor    # (3, 3, channels, attn_channels)
    attn_bias1: Tensor
    attn_kernel2: Tensor    # (1, 1, attn_channels, 1)
    attn_bias2: Tensor
    confidence_w: Tensor    # (candidates, channels * trace_count)
    confidence_b: Tensor

    def named(self, prefix: str = "detector") -> dict[str, Tensor]:
        out = {
            f"{prefix}.reduce_kernel": self.reduce_kernel,
            f"{prefix}.reduce_bias": self.reduce_bias,
            f"{prefix}.attn_kernel1": self.attn_kernel1,
            f"{prefix}.attn_bias1": self.attn_bias1,
            f"{prefix}.attn_kernel2": self.attn_kernel2,
            f"{prefix}.attn_bias2": self.attn_bias2,
            f"{prefix}.confidence_w": self.confidence_w,
            f"{prefix}.confidence_b": self.confidence_b,
        }
        out.update(self.trace_lstm.named(f"{prefix}.trace"))
        return out


@dataclass
class ConceptModel:
    """Detector bundled with the shared embedding and candidate word list."""

    params: DetectorParams
    config: ModelConfig
    embedding: Tensor          # (embed_dim, vocab_size), shared with language heads
    candidate_vocab_ids: np.ndarray  # vocab id of each candidate index
    candidate_words: list[str]


@dataclass
class ConceptSet:
    """Top-K detected concept words, confidence-sorted."""

    candidate_indices: np.ndarray
    vocab_ids: np.ndarray
    confidences: np.ndarray
    embeddings: Tensor  # (K, embed_dim)


@dataclass
class TraceState:
    attention: Tensor       # (L, cells), each row on the simplex
    lstm: nn.LstmState      # batched over traces
    step: int


def make_detector(cfg: ModelConfig, seed, in_channels: int | None = None) -> DetectorParams:
    cfg.validate()
    c_in = in_channels if in_channels is not None else cfg.channels
    seq = nn.seedseq_of(seed)
    kids = seq.spawn(4)
    return DetectorParams(
        reduce_kernel=nn.xavier_conv_init(3, 3, c_in, cfg.channels, kids[0]),
        reduce_bias=nn.zeros_param(cfg.channels),
        trace_lstm=nn.make_lstm(
            cfg.channels, cfg.channels, kids[1], depth=cfg.trace_depth
        ),
        attn_kernel1=nn.xavier_conv_init(3, 3, cfg.channels, cfg.attn_channels, kids[2]),
        attn_bias1=nn.zeros_param(cfg.attn_channels),
        attn_kernel2=nn.xavier_conv_init(1, 1, cfg.attn_channels, 1, kids[3]),
        attn_bias2=nn.zeros_param(1),
        confidence_w=nn.xavier_init(
            (cfg.candidates, cfg.channels * cfg.trace_count), seq.spawn(1)[0]
        ),
        confidence_b=nn.zeros_param(cfg.candidates),
    )


def _pool_target(extent: int, goal: int) -> int:
    if extent < 2 * goal:
        return 2 * goal
    return extent + extent % 2


def reduce_frame(params: DetectorParams, raw: Tensor, cfg: ModelConfig) -> Tensor:
    """Max-pool a raw (H, W, C) grid down to the working grid, then 3x3 conv.

    Spatial extents are zero-padded right/bottom so stride-2 pooling lands
    exactly on (grid_h, grid_w); the conv reduces channels to cfg.channels.
    """
    h, w = raw.shape[0], raw.shape[1]
    if h < cfg.grid_h or w < cfg.grid_w:
        raise DimensionError(
            f"frame {h}x{w} is smaller than the {cfg.grid_h}x{cfg.grid_w} grid"
        )
    x = raw
    while h > cfg.grid_h or w > cfg.grid_w:
        th = _pool_target(h, cfg.grid_h) if h > cfg.grid_h else 2 * cfg.grid_h
        tw = _pool_target(w, cfg.grid_w) if w > cfg.grid_w else 2 * cfg.grid_w
        if (th, tw) != (h, w):
            x = T.pad_spatial(x, th, tw)
        x = T.pool2d(x, "max", 2)
        h, w = th // 2, tw // 2
    return T.conv2d(x, params.reduce_kernel, params.reduce_bias)


def cell_hidden_product(cells: Tensor, hidden: Tensor) -> Tensor:
    """Per-trace elementwise product of every grid cell with a hidden state.

    cells is (C, D), hidden (L, D); returns (L, C, D).
    """
    if cells.shape[-1] != hidden.shape[-1]:
        raise DimensionError(
            f"cell width {cells.shape} does not match hidden width {hidden.shape}"
        )
    cd, hd = cells.data, hidden.data
    y = cd[None, :, :] * hd[:, None, :]

    def bwd(g):
        return (g * hd[:, None, :]).sum(axis=0), (g * cd[None, :, :]).sum(axis=1)

    return T.record(y, [cells, hidden], bwd, "cell_hidden_product")


def initial_trace_state(params: DetectorParams, cfg: ModelConfig) -> TraceState:
    """One-hot attention, trace l hot at grid cell l (row-major); zero LSTM state."""
    alpha = Tensor(np.eye(cfg.trace_count, cfg.grid_h * cfg.grid_w))
    return TraceState(alpha, nn.initial_state(params.trace_lstm, batch=cfg.trace_count), 0)


def trace_step(
    state: TraceState, frame: Tensor, params: DetectorParams, cfg: ModelConfig
) -> TraceState:
    """Advance every trace by one frame.

    The stored attention pools the frame into per-trace context vectors;
    the shared LSTM advances; the next attention map is scored from the
    pre-update hidden state (so the one-hot initialization is what
    differentiates traces at the first step).
    """
    if not isinstance(state, TraceState):
        raise UsageError("trace_step needs a state from initial_trace_state")
    if frame.shape != (cfg.grid_h, cfg.grid_w, cfg.channels):
        raise DimensionError(
            f"frame shape {frame.shape} does not match grid "
            f"({cfg.grid_h}, {cfg.grid_w}, {cfg.channels})"
        )
    cells = T.reshape(frame, (cfg.grid_h * cfg.grid_w, cfg.channels))
    context = T.matmul(state.attention, cells)
    h_prev = state.lstm.top
    new_lstm = nn.lstm_step(params.trace_lstm, context, state.lstm)

    scores = cell_hidden_product(cells, h_prev)
    scores = T.reshape(scores, (cfg.trace_count, cfg.grid_h, cfg.grid_w, cfg.channels))
    scores = T.relu(T.conv2d(scores, params.attn_kernel1, params.attn_bias1))
    scores = T.conv2d(scores, params.attn_kernel2, params.attn_bias2)
    scores = T.reshape(scores, (cfg.trace_count, cfg.grid_h * cfg.grid_w))
    attention = T.softmax(scores, axis=1)
    return TraceState(attention, new_lstm, state.step + 1)


def run_traces(
    params: DetectorParams, reduced_frames: list[Tensor], cfg: ModelConfig
) -> tuple[Tensor, list[Tensor]]:
    """Roll the trace bank over reduced frames.

    Returns the final (L, channels) hidden block and the attention maps
    from every step including the one-hot initialization.
    """
    if not reduced_frames:
        raise UsageError("run_traces requires at least one frame")
    state = initial_trace_state(params, cfg)
    alphas = [state.attention]
    for frame in reduced_frames:
        state = trace_step(state, frame, params, cfg)
        alphas.append(state.attention)
    return state.lstm.top, alphas


def concept_confidence(final_hidden: Tensor, params: DetectorParams) -> Tensor:
    """Sigmoid confidence per candidate from the concatenated trace hiddens."""
    flat = T.reshape(final_hidden, (final_hidden.shape[0] * final_hidden.shape[1],))
    return T.sigmoid(T.add(T.matmul(params.confidence_w, flat), params.confidence_b))


def concept_loss(confidence: Tensor, targets: np.ndarray) -> Tensor:
    """Mean sigmoid cross-entropy against a binary presence vector."""
    targets = np.asarray(targets)
    if targets.shape != confidence.shape:
        raise UsageError(
            f"targets shape {targets.shape} does not match confidence {confidence.shape}"
        )
    if not np.all((targets == 0) | (targets == 1)):
        raise UsageError("concept_loss targets must be binary")
    t = Tensor(targets.astype(confidence.data.dtype), dtype=confidence.data.dtype)
    # Clamp each log argument: float32 sigmoids saturate to exactly 0 and 1.
    pos = T.mul(t, T.log(T.clip(confidence, CONFIDENCE_EPS, 1.0)))
    negt = T.mul(T.sub(1.0, t), T.log(T.clip(T.sub(1.0, confidence), CONFIDENCE_EPS, 1.0)))
    return T.mul(T.tsum(T.add(pos, negt)), -1.0 / confidence.shape[0])


def detector_forward(
    model: ConceptModel, frames: list[Tensor]
) -> tuple[Tensor, list[Tensor], list[Tensor]]:
    """Reduce raw frames, roll traces, score candidates.

    Returns (confidence vector, attention maps, reduced frames); reduced
    frames are reused by the video encoder of the task models.
    """
    reduced = [reduce_frame(model.params, f, model.config) for f in frames]
    final_hidden, alphas = run_traces(model.params, reduced, model.config)
    return concept_confidence(final_hidden, model.params), alphas, reduced


def top_k_concepts(model: ConceptModel, confidence: Tensor, k: int) -> ConceptSet:
    """Confidence-sorted top-k; equal confidences break toward lower word id."""
    n = confidence.shape[0]
    if k > n:
        raise UsageError(f"requested top {k} of only {n} candidates")
    conf = confidence.data
    order = np.lexsort((np.arange(n), -conf))[:k]
    vocab_ids = model.candidate_vocab_ids[order]
    return ConceptSet(
        candidate_indices=order,
        vocab_ids=vocab_ids,
        confidences=conf[order].copy(),
        embeddings=T.take_columns(model.embedding, vocab_ids.tolist()),
    )


def detect(clip: FeatureClip, model: ConceptModel, k: int) -> ConceptSet:
    """Full detection pipeline for one clip (inference path)."""
    frames = [Tensor(f) for f in clip.frames]
    confidence, _, _ = detector_forward(model, frames)
    return top_k_concepts(model, confidence, k)
