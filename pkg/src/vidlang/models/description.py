"""Caption generation: video encoder, attention-fed decoder, regularized loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn, semattn, tensor as T
from ..concept import ConceptModel, concept_loss, make_detector
from ..config import ModelConfig
from ..corpus import EOS, PAD, FeatureClip
from ..errors import UsageError
from ..tensor import Tensor
from .base import Prologue, nll_of, regularizer_of, run_prologue, shared_core_params

START_TOKEN = PAD  # decoder sees <pad> as the step-one previous word


@dataclass
class DescriptionModel:
    concept: ConceptModel
    encoder: nn.LstmParams
    decoder: nn.LstmParams
    input_attn: semattn.InputAttnParams
    output_attn: semattn.OutputAttnParams
    out_proj: Tensor   # (hidden, vocab)
    out_bias: Tensor
    config: ModelConfig

    def parameters(self) -> dict[str, Tensor]:
        out = shared_core_params(self)
        out.update(self.decoder.named("decoder"))
        out.update(semattn.named_input_attn(self.input_attn, "input_attn"))
        out.update(semattn.named_output_attn(self.output_attn, "output_attn"))
        out["out_proj"] = self.out_proj
        out["out_bias"] = self.out_bias
        return out


def make_description_model(
    cfg: ModelConfig, candidate_vocab_ids: np.ndarray, candidate_words: list[str], seed
) -> DescriptionModel:
    cfg.validate()
    kids = nn.seedseq_of(seed).spawn(7)
    embedding = nn.xavier_init((cfg.embed_dim, cfg.vocab_size), kids[0])
    detector = make_detector(cfg, kids[1])
    concept_model = ConceptModel(
        detector, cfg, embedding, np.asarray(candidate_vocab_ids), list(candidate_words)
    )
    return DescriptionModel(
        concept=concept_model,
        encoder=nn.make_lstm(cfg.channels, cfg.hidden, kids[2], depth=cfg.depth),
        decoder=nn.make_lstm(cfg.hidden, cfg.hidden, kids[3], depth=cfg.depth),
        input_attn=semattn.make_input_attn(cfg.embed_dim, cfg.hidden, kids[4]),
        output_attn=semattn.make_output_attn(cfg.embed_dim, cfg.hidden, kids[5]),
        out_proj=nn.xavier_init((cfg.hidden, cfg.vocab_size), kids[6]),
        out_bias=nn.zeros_param(cfg.vocab_size),
        config=cfg,
    )


@dataclass
class DescribeResult:
    word_ids: list[int]
    distributions: list[Tensor]
    gamma_stack: Tensor
    beta_stack: Tensor
    prologue: Prologue


def describe(
    model: DescriptionModel,
    clip: FeatureClip,
    mode: str = "greedy",
    gold_ids: list[int] | None = None,
    max_len: int | None = None,
    training: bool = False,
    dropout_rate: float = 0.2,
    rng=None,
) -> DescribeResult:
    """Decode one caption.

    Greedy mode emits the argmax word each step until <EOS> or max_len.
    Teacher-forced mode consumes the gold prefix (gold_ids must end with
    <EOS> and carry no padding) and returns one distribution per step.
    """
    if mode not in ("greedy", "teacher_forced"):
        raise UsageError(f"unknown describe mode {mode!r}")
    if mode == "teacher_forced":
        if not gold_ids:
            raise UsageError("teacher_forced mode needs gold_ids")
        steps = len(gold_ids)
    else:
        steps = max_len if max_len is not None else model.config.max_caption_len
        if steps < 1:
            raise UsageError("max_len must be at least 1")
    pro = run_prologue(
        model.concept, model.encoder, clip, model.config.top_k,
        training, dropout_rate, rng,
    )
    state = nn.initial_state(model.decoder, h0=pro.video_state)
    prev = START_TOKEN
    word_ids: list[int] = []
    dists: list[Tensor] = []
    gammas: list[Tensor] = []
    betas: list[Tensor] = []
    for t in range(steps):
        emb = T.reshape(nn.embed_lookup(model.concept.embedding, [prev]), (model.config.embed_dim,))
        x, gamma = semattn.input_attention(emb, pro.concepts.embeddings, model.input_attn)
        state = nn.lstm_step(model.decoder, x, state, training, dropout_rate, rng)
        mixed, beta = semattn.output_attention(
            state.top, pro.concepts.embeddings, model.output_attn
        )
        dist = T.softmax(T.add(T.matmul(mixed, model.out_proj), model.out_bias), axis=0)
        dists.append(dist)
        gammas.append(gamma)
        betas.append(beta)
        if mode == "teacher_forced":
            word = gold_ids[t]
        else:
            word = int(np.argmax(dist.data))
        word_ids.append(word)
        prev = word
        if mode == "greedy" and word == EOS:
            break
    return DescribeResult(word_ids, dists, T.stack(gammas), T.stack(betas), pro)


def description_loss(
    result: DescribeResult,
    gold_ids: list[int],
    targets: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> Tensor:
    """Word NLL plus attention regularizers plus the detector auxiliary loss."""
    if len(result.distributions) != len(gold_ids):
        raise UsageError(
            f"{len(result.distributions)} distributions vs {len(gold_ids)} gold words"
        )
    total = nll_of(result.distributions[0], gold_ids[0])
    for t in range(1, len(gold_ids)):
        total = T.add(total, nll_of(result.distributions[t], gold_ids[t]))
    if lambda1:
        reg = regularizer_of([result.beta_stack, result.gamma_stack])
        total = T.add(total, T.mul(reg, lambda1))
    if lambda2:
        con = concept_loss(result.prologue.confidence, targets)
        total = T.add(total, T.mul(con, lambda2))
    return total
