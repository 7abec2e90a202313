"""Fill-in-the-blank: bidirectional LSTM over attention-mixed words,
prediction head applied once at the blank position."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn, semattn, tensor as T
from ..concept import ConceptModel, concept_loss, make_detector
from ..config import ModelConfig
from ..corpus import BLANK, FeatureClip
from ..errors import InputError
from ..tensor import Tensor
from .base import (
    Prologue, input_attended_sequence, nll_of, regularizer_of, run_prologue,
    shared_core_params,
)

RESERVED_ID_COUNT = 4  # <pad>, <EOS>, <UNK>, <blank> never answer a blank


@dataclass
class FibModel:
    concept: ConceptModel
    encoder: nn.LstmParams
    forward_lstm: nn.LstmParams
    backward_lstm: nn.LstmParams
    input_attn: semattn.InputAttnParams
    output_attn: semattn.OutputAttnParams
    merge_proj: Tensor  # (2*hidden, hidden)
    merge_bias: Tensor
    out_proj: Tensor    # (hidden, vocab)
    out_bias: Tensor
    config: ModelConfig

    def parameters(self) -> dict[str, Tensor]:
        out = shared_core_params(self)
        out.update(self.forward_lstm.named("fwd_lstm"))
        out.update(self.backward_lstm.named("bwd_lstm"))
        out.update(semattn.named_input_attn(self.input_attn, "input_attn"))
        out.update(semattn.named_output_attn(self.output_attn, "output_attn"))
        out["merge_proj"] = self.merge_proj
        out["merge_bias"] = self.merge_bias
        out["out_proj"] = self.out_proj
        out["out_bias"] = self.out_bias
        return out


def make_fib_model(
    cfg: ModelConfig, candidate_vocab_ids: np.ndarray, candidate_words: list[str], seed
) -> FibModel:
    cfg.validate()
    kids = nn.seedseq_of(seed).spawn(9)
    embedding = nn.xavier_init((cfg.embed_dim, cfg.vocab_size), kids[0])
    detector = make_detector(cfg, kids[1])
    concept_model = ConceptModel(
        detector, cfg, embedding, np.asarray(candidate_vocab_ids), list(candidate_words)
    )
    return FibModel(
        concept=concept_model,
        encoder=nn.make_lstm(cfg.channels, cfg.hidden, kids[2], depth=cfg.depth),
        forward_lstm=nn.make_lstm(cfg.hidden, cfg.hidden, kids[3], depth=cfg.depth),
        backward_lstm=nn.make_lstm(cfg.hidden, cfg.hidden, kids[4], depth=cfg.depth),
        input_attn=semattn.make_input_attn(cfg.embed_dim, cfg.hidden, kids[5]),
        output_attn=semattn.make_output_attn(cfg.embed_dim, cfg.hidden, kids[6]),
        merge_proj=nn.xavier_init((2 * cfg.hidden, cfg.hidden), kids[7]),
        merge_bias=nn.zeros_param(cfg.hidden),
        out_proj=nn.xavier_init((cfg.hidden, cfg.vocab_size), kids[8]),
        out_bias=nn.zeros_param(cfg.vocab_size),
        config=cfg,
    )


@dataclass
class FibResult:
    distribution: Tensor
    blank_position: int
    gamma_stack: Tensor  # (T, K)
    beta_stack: Tensor   # (1, K): attention applied once, at the blank
    prologue: Prologue


def fib_predict(
    model: FibModel,
    clip: FeatureClip,
    token_ids: list[int],
    training: bool = False,
    dropout_rate: float = 0.2,
    rng=None,
) -> FibResult:
    """Distribution over the vocabulary for the single <blank> token."""
    blanks = [t for t, wid in enumerate(token_ids) if wid == BLANK]
    if len(blanks) != 1:
        raise InputError(f"expected exactly one <blank>, found {len(blanks)}")
    blank_pos = blanks[0]
    pro = run_prologue(
        model.concept, model.encoder, clip, model.config.top_k,
        training, dropout_rate, rng,
    )
    xs, gamma_stack = input_attended_sequence(
        token_ids, model.concept.embedding, pro.concepts, model.input_attn
    )
    # both directions start from the video state
    h0_f = nn.initial_state(model.forward_lstm, h0=pro.video_state)
    h0_b = nn.initial_state(model.backward_lstm, h0=pro.video_state)
    h_f, h_b = nn.blstm_run(
        model.forward_lstm, model.backward_lstm, xs, h0_f, h0_b,
        training, dropout_rate, rng,
    )
    merged = T.tanh(
        T.add(
            T.matmul(T.concat([h_f[blank_pos], h_b[blank_pos]]), model.merge_proj),
            model.merge_bias,
        )
    )
    mixed, beta = semattn.output_attention(
        merged, pro.concepts.embeddings, model.output_attn
    )
    dist = T.softmax(T.add(T.matmul(mixed, model.out_proj), model.out_bias), axis=0)
    return FibResult(dist, blank_pos, gamma_stack, T.stack([beta]), pro)


def fib_answer_id(result: FibResult) -> int:
    """Argmax over real words; reserved tokens never answer a blank."""
    probs = result.distribution.data.copy()
    probs[:RESERVED_ID_COUNT] = -np.inf
    return int(np.argmax(probs))


def fib_loss(
    result: FibResult,
    gold_word_id: int,
    targets: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> Tensor:
    total = nll_of(result.distribution, gold_word_id)
    if lambda1:
        reg = regularizer_of([result.beta_stack, result.gamma_stack])
        total = T.add(total, T.mul(reg, lambda1))
    if lambda2:
        con = concept_loss(result.prologue.confidence, targets)
        total = T.add(total, T.mul(con, lambda2))
    return total
