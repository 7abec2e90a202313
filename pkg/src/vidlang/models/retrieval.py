"""Cross-modal retrieval: compact-bilinear fusion of video and query
states, maxout head, in-batch max-margin training, similarity matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import nn, semattn, tensor as T
from ..concept import ConceptModel, concept_loss, make_detector
from ..config import ModelConfig
from ..corpus import FeatureClip
from ..errors import DimensionError, UsageError
from ..tensor import Tensor
from .base import (
    Prologue, hinge_sum, input_attended_sequence, regularizer_of, run_prologue,
    shared_core_params,
)

FUSION_DROPOUT = 0.5  # applied to the fused vector before the maxout head


@dataclass
class RetrievalModel:
    concept: ConceptModel
    encoder: nn.LstmParams
    query_lstm: nn.LstmParams
    input_attn: semattn.InputAttnParams
    sketch: nn.SketchParams  # fixed, never trained
    head: nn.MaxoutParams
    score_vec: Tensor  # (maxout_dim,)
    config: ModelConfig

    def parameters(self) -> dict[str, Tensor]:
        out = shared_core_params(self)
        out.update(self.query_lstm.named("query_lstm"))
        out.update(semattn.named_input_attn(self.input_attn, "input_attn"))
        out.update(self.head.named("head"))
        out["score_vec"] = self.score_vec
        return out


def make_retrieval_model(
    cfg: ModelConfig, candidate_vocab_ids: np.ndarray, candidate_words: list[str], seed
) -> RetrievalModel:
    cfg.validate()
    kids = nn.seedseq_of(seed).spawn(8)
    embedding = nn.xavier_init((cfg.embed_dim, cfg.vocab_size), kids[0])
    detector = make_detector(cfg, kids[1])
    concept_model = ConceptModel(
        detector, cfg, embedding, np.asarray(candidate_vocab_ids), list(candidate_words)
    )
    return RetrievalModel(
        concept=concept_model,
        encoder=nn.make_lstm(cfg.channels, cfg.hidden, kids[2], depth=cfg.depth),
        query_lstm=nn.make_lstm(cfg.hidden, cfg.hidden, kids[3], depth=cfg.depth),
        input_attn=semattn.make_input_attn(cfg.embed_dim, cfg.hidden, kids[4]),
        sketch=nn.make_sketch(cfg.hidden, cfg.hidden, cfg.sketch_dim, kids[5]),
        head=nn.make_maxout(cfg.sketch_dim, cfg.maxout_dim, k=2, seed=kids[6]),
        score_vec=Tensor(
            nn.xavier_init((cfg.maxout_dim, 1), kids[7]).data.reshape(-1),
            requires_grad=True,
        ),
        config=cfg,
    )


def encode_query(
    model: RetrievalModel,
    pro: Prologue,
    token_ids: list[int],
    training: bool = False,
    dropout_rate: float = 0.2,
    rng=None,
) -> tuple[Tensor, Tensor]:
    """Attention-mixed query encoding; returns (h_T, gamma stack)."""
    if not token_ids:
        raise UsageError("retrieval query must be non-empty")
    xs, gamma_stack = input_attended_sequence(
        token_ids, model.concept.embedding, pro.concepts, model.input_attn
    )
    state = nn.initial_state(model.query_lstm)
    for x in xs:
        state = nn.lstm_step(model.query_lstm, x, state, training, dropout_rate, rng)
    return state.top, gamma_stack


def fusion_score(
    model: RetrievalModel,
    video_state: Tensor,
    query_state: Tensor,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Compact-bilinear fuse the two states and score through the maxout head."""
    fused = nn.compact_bilinear(video_state, query_state, model.sketch)
    fused = nn.dropout_apply(fused, FUSION_DROPOUT, training, rng)
    return T.matmul(nn.maxout(fused, model.head), model.score_vec)


def retrieval_score(
    model: RetrievalModel,
    clip: FeatureClip,
    token_ids: list[int],
    training: bool = False,
    dropout_rate: float = 0.2,
    rng=None,
) -> tuple[Tensor, Tensor]:
    """Score one (clip, query) pair end to end."""
    pro = run_prologue(
        model.concept, model.encoder, clip, model.config.top_k,
        training, dropout_rate, rng,
    )
    query_state, gamma_stack = encode_query(
        model, pro, token_ids, training, dropout_rate, rng
    )
    return fusion_score(model, pro.video_state, query_state, training, rng), gamma_stack


def retrieval_loss(
    score_row: list[Tensor],
    positive_index: int,
    gamma_stacks: list[Tensor],
    confidence: Tensor,
    targets: np.ndarray,
    margin: float = 3.0,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
) -> Tensor:
    """Hinge of one query against in-batch negatives."""
    if len(score_row) < 2:
        raise UsageError("retrieval_loss needs at least one negative in the batch")
    total = hinge_sum(score_row, positive_index, margin)
    if lambda1:
        total = T.add(total, T.mul(regularizer_of(gamma_stacks), lambda1))
    if lambda2:
        total = T.add(total, T.mul(concept_loss(confidence, targets), lambda2))
    return total


# ---------------------------------------------------------------------------
# similarity matrices


@dataclass
class SimilarityMatrix:
    """Dense clip-by-sentence score table with id manifests."""

    row_ids: list[str]
    col_ids: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.shape != (len(self.row_ids), len(self.col_ids)):
            raise DimensionError(
                f"score table {self.scores.shape} does not match id lists "
                f"({len(self.row_ids)}, {len(self.col_ids)})"
            )
        if not np.all(np.isfinite(self.scores)):
            raise UsageError("similarity matrix contains non-finite scores")

    def transposed(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.col_ids, self.row_ids, self.scores.T.copy())

    def save(self, path) -> None:
        path = Path(path)
        nn.save_checkpoint({"scores": Tensor(self.scores)}, path)
        manifest = path.with_suffix(path.suffix + ".ids.jsonl")
        with open(manifest, "w") as fh:
            fh.write(json.dumps({"axis": "rows", "ids": self.row_ids}) + "\n")
            fh.write(json.dumps({"axis": "cols", "ids": self.col_ids}) + "\n")

    @classmethod
    def load(cls, path) -> "SimilarityMatrix":
        path = Path(path)
        scores = nn.load_checkpoint(path)["scores"]
        manifest = path.with_suffix(path.suffix + ".ids.jsonl")
        axes = {}
        for line in manifest.read_text().splitlines():
            entry = json.loads(line)
            axes[entry["axis"]] = entry["ids"]
        return cls(axes["rows"], axes["cols"], scores)


def similarity_matrix(
    clips: list[FeatureClip],
    sentences: list[tuple[str, list[int]]],
    scorer,
) -> SimilarityMatrix:
    """Dense scorer table; rows follow clip order, columns sentence order.

    ``scorer(clip, token_ids) -> float`` must be pure per pair.
    """
    if not clips or not sentences:
        raise UsageError("similarity_matrix needs clips and sentences")
    table = np.zeros((len(clips), len(sentences)), dtype=np.float32)
    for i, clip in enumerate(clips):
        for j, (_, token_ids) in enumerate(sentences):
            value = scorer(clip, token_ids)
            table[i, j] = value.item() if isinstance(value, Tensor) else float(value)
    return SimilarityMatrix(
        [c.clip_id for c in clips], [sid for sid, _ in sentences], table
    )
