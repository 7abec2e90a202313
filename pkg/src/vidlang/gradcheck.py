"""End-to-end gradient checking of every task loss on tiny configurations.

Each check builds a small model in 64-bit precision, evaluates the full
task loss on one synthetic example with dropout off, and sweeps every
parameter with central differences.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .concept import concept_loss, detector_forward
from .config import ModelConfig
from .corpus import SyntheticSpec, generate_synthetic
from .errors import UsageError
from .models import (
    concept_targets, describe, description_loss, fib_loss, fib_predict,
    mc_loss, mc_score_choices,
)
from .tensor import GradCheckReport
from .train import TrainConfig, dataset_examples, make_task_model, retrieval_batch_loss

CHECKS = ("concept", "desc", "fib", "mc", "ret")

# Channels 8, hidden 8, K 3, N 3 frames, 20-word vocabulary.
TINY_SPEC = SyntheticSpec(
    channels=8, frames=3, candidate_count=8, filler_count=8,
    concepts_min=1, concepts_max=2, train_clips=4, val_clips=1, test_clips=1,
)


def tiny_model_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(
        channels=8, attn_channels=3, candidates=8, top_k=3, vocab_size=vocab_size,
        embed_dim=6, hidden=8, depth=1, sketch_dim=16, maxout_dim=6,
    ).validate()


def run_gradcheck(
    check: str, step: float = 1e-5, tolerance: float = 1e-4, seed: int = 0
) -> GradCheckReport:
    """Gradient-check one loss; returns the per-parameter report."""
    if check not in CHECKS:
        raise UsageError(f"unknown gradcheck target {check!r}; expected one of {CHECKS}")
    with T.precision("f64"):
        spec = SyntheticSpec(**{**vars(TINY_SPEC), "seed": seed})
        dataset = generate_synthetic(spec)
        cfg = tiny_model_config(len(dataset.vocabulary))
        assert len(dataset.vocabulary) == 20
        candidate_ids = np.array(
            [dataset.vocabulary.id_of(w) for w in dataset.candidate_words]
        )
        task = "desc" if check == "concept" else check
        model = make_task_model(task, cfg, candidate_ids, dataset.candidate_words, seed)
        examples = dataset_examples(dataset, "train")
        ex = examples[0]
        targets = concept_targets(model.concept, ex.caption_tokens)

        if check == "concept":
            frames = [T.Tensor(f, dtype=np.float64) for f in ex.clip.frames]
            params = model.concept.params.named("detector")

            def f():
                confidence, _, _ = detector_forward(model.concept, frames)
                return concept_loss(confidence, targets)

        elif check == "desc":
            params = model.parameters()

            def f():
                result = describe(
                    model, ex.clip, mode="teacher_forced", gold_ids=ex.gold_ids
                )
                return description_loss(result, ex.gold_ids, targets, 1e-2, 1.0)

        elif check == "fib":
            params = model.parameters()

            def f():
                result = fib_predict(model, ex.clip, ex.fib_ids)
                return fib_loss(result, ex.fib_gold, targets, 1e-2, 1.0)

        elif check == "mc":
            params = model.parameters()

            def f():
                scores, stacks, pro = mc_score_choices(model, ex.clip, ex.mc_choice_ids)
                return mc_loss(
                    scores, ex.mc_answer, stacks, pro.confidence, targets,
                    margin=1.0, lambda1=1e-2, lambda2=1.0,
                )

        else:  # ret
            params = model.parameters()
            batch = examples[:2]
            config = TrainConfig(task="ret", lambda1=1e-2, lambda2=1.0, margin_ret=3.0)

            def f():
                return retrieval_batch_loss(model, batch, config, False, None)

        return T.grad_check(f, params, step=step, tolerance=tolerance)
