"""Shared plumbing for the task models: video encoding, the concept
pipeline prologue, and the hinge/NLL loss helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn, semattn, tensor as T
from ..concept import ConceptModel, ConceptSet, detector_forward, top_k_concepts
from ..corpus import FeatureClip
from ..errors import UsageError
from ..tensor import Tensor

LOG_EPS = 1e-12


def encode_video(
    frames: list[Tensor],
    encoder: nn.LstmParams,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng=None,
) -> tuple[list[Tensor], Tensor]:
    """Average-pool each reduced grid and run the video LSTM.

    Returns the per-frame top hidden states and the final state.
    """
    if not frames:
        raise UsageError("encode_video requires a non-empty clip")
    state = nn.initial_state(encoder)
    states = []
    for frame in frames:
        pooled = T.pool2d(frame, "avg", "full")
        state = nn.lstm_step(encoder, pooled, state, training, dropout_rate, rng)
        states.append(state.top)
    return states, states[-1]


@dataclass
class Prologue:
    """Everything the language heads need about one clip."""

    confidence: Tensor        # (candidates,)
    alphas: list[Tensor]      # trace attention maps, incl. initialization
    frame_states: list[Tensor]
    video_state: Tensor       # s_N
    concepts: ConceptSet


def run_prologue(
    concept_model: ConceptModel,
    encoder: nn.LstmParams,
    clip: FeatureClip,
    k: int,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng=None,
) -> Prologue:
    frames = [Tensor(f) for f in clip.frames]
    confidence, alphas, reduced = detector_forward(concept_model, frames)
    states, final = encode_video(reduced, encoder, training, dropout_rate, rng)
    concepts = top_k_concepts(concept_model, confidence, k)
    return Prologue(confidence, alphas, states, final, concepts)


def concept_targets(concept_model: ConceptModel, caption_tokens: list[str]) -> np.ndarray:
    """Binary presence vector over the candidate words for one caption."""
    present = set(caption_tokens)
    return np.array(
        [1.0 if w in present else 0.0 for w in concept_model.candidate_words]
    )


def nll_of(dist: Tensor, word_id: int) -> Tensor:
    """Negative log-likelihood of one word under a distribution tensor."""
    return T.neg(T.log(T.clip(T.pick(dist, word_id), LOG_EPS, 1.0)))


def hinge_sum(scores: list[Tensor], positive: int, margin: float) -> Tensor:
    """Sum of max(0, s_l - s_pos + margin) over the negatives."""
    if not 0 <= positive < len(scores):
        raise UsageError(f"positive index {positive} out of range for {len(scores)} scores")
    total = None
    for l, s in enumerate(scores):
        if l == positive:
            continue
        term = T.relu(T.add(T.sub(s, scores[positive]), margin))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise UsageError("hinge needs at least one negative")
    return total


def regularizer_of(stacks: list[Tensor]) -> Tensor:
    """Sum of the attention regularizer over the provided (T, K) stacks."""
    total = None
    for stacked in stacks:
        term = semattn.attention_regularizer(stacked)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise UsageError("regularizer_of needs at least one stack")
    return total


def input_attended_sequence(
    token_ids: list[int],
    embedding: Tensor,
    concepts: ConceptSet,
    attn: semattn.InputAttnParams,
) -> tuple[list[Tensor], Tensor]:
    """Embed a token sequence and mix concepts into every step.

    Returns the LSTM input vectors and the stacked (T, K) attention rows.
    """
    xs, gammas = [], []
    for wid in token_ids:
        emb = T.reshape(nn.embed_lookup(embedding, [wid]), (embedding.shape[0],))
        x, gamma = semattn.input_attention(emb, concepts.embeddings, attn)
        xs.append(x)
        gammas.append(gamma)
    return xs, T.stack(gammas)


def shared_core_params(model) -> dict[str, Tensor]:
    """Registry entries every task model has: embedding, detector, encoder."""
    out = {"embedding": model.concept.embedding}
    out.update(model.concept.params.named("detector"))
    out.update(model.encoder.named("encoder"))
    return out
