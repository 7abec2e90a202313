"""Multiple-choice: score each candidate sentence against the clip,
train with a max-margin hinge over the four distractors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn, semattn, tensor as T
from ..concept import ConceptModel, concept_loss, make_detector
from ..config import ModelConfig
from ..corpus import FeatureClip
from ..errors import UsageError
from ..tensor import Tensor
from .base import (
    Prologue, hinge_sum, input_attended_sequence, regularizer_of, run_prologue,
    shared_core_params,
)


@dataclass
class McModel:
    concept: ConceptModel
    encoder: nn.LstmParams
    sentence_lstm: nn.LstmParams
    input_attn: semattn.InputAttnParams
    score_proj: Tensor  # (hidden, hidden)
    score_bias: Tensor
    score_vec: Tensor   # (hidden,)
    config: ModelConfig

    def parameters(self) -> dict[str, Tensor]:
        out = shared_core_params(self)
        out.update(self.sentence_lstm.named("sentence_lstm"))
        out.update(semattn.named_input_attn(self.input_attn, "input_attn"))
        out["score_proj"] = self.score_proj
        out["score_bias"] = self.score_bias
        out["score_vec"] = self.score_vec
        return out


def make_mc_model(
    cfg: ModelConfig, candidate_vocab_ids: np.ndarray, candidate_words: list[str], seed
) -> McModel:
    cfg.validate()
    kids = nn.seedseq_of(seed).spawn(7)
    embedding = nn.xavier_init((cfg.embed_dim, cfg.vocab_size), kids[0])
    detector = make_detector(cfg, kids[1])
    concept_model = ConceptModel(
        detector, cfg, embedding, np.asarray(candidate_vocab_ids), list(candidate_words)
    )
    return McModel(
        concept=concept_model,
        encoder=nn.make_lstm(cfg.channels, cfg.hidden, kids[2], depth=cfg.depth),
        sentence_lstm=nn.make_lstm(cfg.hidden, cfg.hidden, kids[3], depth=cfg.depth),
        input_attn=semattn.make_input_attn(cfg.embed_dim, cfg.hidden, kids[4]),
        score_proj=nn.xavier_init((cfg.hidden, cfg.hidden), kids[5]),
        score_bias=nn.zeros_param(cfg.hidden),
        score_vec=Tensor(
            nn.xavier_init((cfg.hidden, 1), kids[6]).data.reshape(-1), requires_grad=True
        ),
        config=cfg,
    )


def _score_head(model: McModel, h_last: Tensor) -> Tensor:
    z = T.relu(T.add(T.matmul(h_last, model.score_proj), model.score_bias))
    return T.matmul(z, model.score_vec)


def score_sentence(
    model: McModel,
    pro: Prologue,
    token_ids: list[int],
    training: bool = False,
    dropout_rate: float = 0.2,
    rng=None,
) -> tuple[Tensor, Tensor]:
    """Scalar compatibility score for one sentence against a done prologue."""
    if not token_ids:
        raise UsageError("mc_score requires a non-empty sentence")
    xs, gamma_stack = input_attended_sequence(
        token_ids, model.concept.embedding, pro.concepts, model.input_attn
    )
    state = nn.initial_state(model.sentence_lstm, h0=pro.video_state)
    for x in xs:
        state = nn.lstm_step(model.sentence_lstm, x, state, training, dropout_rate, rng)
    return _score_head(model, state.top), gamma_stack


def mc_score(
    model: McModel,
    clip: FeatureClip,
    token_ids: list[int],
    training: bool = False,
    dropout_rate: float = 0.2,
    rng=None,
) -> tuple[Tensor, Tensor]:
    """Score one (clip, sentence) pair from scratch."""
    pro = run_prologue(
        model.concept, model.encoder, clip, model.config.top_k,
        training, dropout_rate, rng,
    )
    return score_sentence(model, pro, token_ids, training, dropout_rate, rng)


def mc_score_choices(
    model: McModel,
    clip: FeatureClip,
    choices: list[list[int]],
    training: bool = False,
    dropout_rate: float = 0.2,
    rng=None,
) -> tuple[list[Tensor], list[Tensor], Prologue]:
    """Score several sentences against one clip, sharing the video pass."""
    pro = run_prologue(
        model.concept, model.encoder, clip, model.config.top_k,
        training, dropout_rate, rng,
    )
    scores, stacks = [], []
    for token_ids in choices:
        s, g = score_sentence(model, pro, token_ids, training, dropout_rate, rng)
        scores.append(s)
        stacks.append(g)
    return scores, stacks, pro


def mc_loss(
    scores: list[Tensor],
    answer_index: int,
    gamma_stacks: list[Tensor],
    confidence: Tensor,
    targets: np.ndarray,
    margin: float = 1.0,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
) -> Tensor:
    """Hinge over the distractors; the answer term is excluded so a fully
    satisfied margin scores exactly zero."""
    total = hinge_sum(scores, answer_index, margin)
    if lambda1:
        total = T.add(total, T.mul(regularizer_of(gamma_stacks), lambda1))
    if lambda2:
        total = T.add(total, T.mul(concept_loss(confidence, targets), lambda2))
    return total
