"""Task models composed from the detector, semantic attention, and layers."""

from .base import (
    Prologue, concept_targets, encode_video, hinge_sum, input_attended_sequence,
    nll_of, regularizer_of, run_prologue,
)
from .choice import McModel, make_mc_model, mc_loss, mc_score, mc_score_choices
from .description import (
    DescribeResult, DescriptionModel, describe, description_loss,
    make_description_model,
)
from .fib import FibModel, FibResult, fib_answer_id, fib_loss, fib_predict, make_fib_model
from .retrieval import (
    RetrievalModel, SimilarityMatrix, encode_query, fusion_score,
    make_retrieval_model, retrieval_loss, retrieval_score, similarity_matrix,
)

__all__ = [
    "Prologue", "concept_targets", "encode_video", "hinge_sum",
    "input_attended_sequence", "nll_of", "regularizer_of", "run_prologue",
    "McModel", "make_mc_model", "mc_loss", "mc_score", "mc_score_choices",
    "DescribeResult", "DescriptionModel", "describe", "description_loss",
    "make_description_model",
    "FibModel", "FibResult", "fib_answer_id", "fib_loss", "fib_predict",
    "make_fib_model",
    "RetrievalModel", "SimilarityMatrix", "encode_query", "fusion_score",
    "make_retrieval_model", "retrieval_loss", "retrieval_score",
    "similarity_matrix",
]
