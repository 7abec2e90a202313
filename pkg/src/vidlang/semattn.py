"""Input and output semantic attention over detected concept words.

Both operators weight the K concept embeddings with a softmax and mix
the weighted sum back into the word encoding (input side) or into the
hidden state used for word prediction (output side). The shared
regularizer encourages attention mass to spread over concepts across
time while staying peaked within a step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import UsageError
from .nn import seedseq_of, xavier_init
from .tensor import Tensor


@dataclass
class InputAttnParams:
    word_concept: Tensor  # (d, d) bilinear form between word and concept embeddings
    input_proj: Tensor    # (d, D) projection of the mixed word vector into the LSTM input
    input_gate: Tensor    # (d,)  per-channel gate on the concept mix


@dataclass
class OutputAttnParams:
    concept_proj: Tensor  # (d, D) projection of squashed concepts into hidden space
    output_gate: Tensor   # (D,)  per-channel gate on the projected concept mix


def make_input_attn(embed_dim: int, hidden: int, seed) -> InputAttnParams:
    seq = seedseq_of(seed).generate_state(2).tolist()
    return InputAttnParams(
        word_concept=xavier_init((embed_dim, embed_dim), seq[0]),
        input_proj=xavier_init((embed_dim, hidden), seq[1]),
        input_gate=Tensor(np.ones(embed_dim), requires_grad=True),
    )


def make_output_attn(embed_dim: int, hidden: int, seed) -> OutputAttnParams:
    return OutputAttnParams(
        concept_proj=xavier_init((embed_dim, hidden), seed),
        output_gate=Tensor(np.ones(hidden), requires_grad=True),
    )


def named_input_attn(p: InputAttnParams, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.word_concept": p.word_concept,
        f"{prefix}.input_proj": p.input_proj,
        f"{prefix}.input_gate": p.input_gate,
    }


def named_output_attn(p: OutputAttnParams, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.concept_proj": p.concept_proj,
        f"{prefix}.output_gate": p.output_gate,
    }


def input_attention(
    word_emb: Tensor, concept_embs: Tensor, params: InputAttnParams
) -> tuple[Tensor, Tensor]:
    """Mix concept embeddings into one word embedding.

    word_emb is (d,), concept_embs is (K, d) with one concept per row.
    Returns the LSTM input vector (D,) and the attention weights (K,).
    """
    if concept_embs.ndim != 2 or concept_embs.shape[0] < 1:
        raise UsageError("input_attention requires a non-empty (K, d) concept matrix")
    logits = T.matmul(concept_embs, T.matmul(word_emb, params.word_concept))
    weights = T.softmax(logits, axis=0)
    mix = T.matmul(weights, concept_embs)
    gated = T.add(word_emb, T.mul(params.input_gate, mix))
    return T.matmul(gated, params.input_proj), weights


def output_attention(
    hidden: Tensor, concept_embs: Tensor, params: OutputAttnParams
) -> tuple[Tensor, Tensor]:
    """Mix squashed concept embeddings into a hidden state before prediction.

    hidden is (D,), concept_embs is (K, d). Returns the mixed vector (D,)
    and the attention weights (K,).
    """
    if concept_embs.ndim != 2 or concept_embs.shape[0] < 1:
        raise UsageError("output_attention requires a non-empty (K, d) concept matrix")
    projected = T.matmul(T.tanh(concept_embs), params.concept_proj)  # (K, D)
    weights = T.softmax(T.matmul(projected, hidden), axis=0)
    mix = T.matmul(weights, projected)
    return T.add(hidden, T.mul(params.output_gate, mix)), weights


def attention_regularizer(stacked: Tensor) -> Tensor:
    """Norm penalty on a (T, K) stack of attention rows.

    Column sums enter squared under an outer square root; row sums enter
    under a square root with an outer square. Zero sums contribute zero
    with a zero subgradient.
    """
    if np.any(stacked.data < 0):
        raise UsageError("attention_regularizer expects nonnegative weights")
    if stacked.ndim != 2:
        raise UsageError(f"attention_regularizer expects a (T, K) matrix, got {stacked.shape}")
    col_sums = T.tsum(stacked, axis=0)
    col_term = T.sqrt(T.tsum(T.mul(col_sums, col_sums)))
    row_sums = T.tsum(stacked, axis=1)
    row_root = T.tsum(T.sqrt(row_sums))
    return T.add(col_term, T.mul(row_root, row_root))
