"""Shared builders for model-level and acceptance tests."""

import numpy as np

from vidlang.config import ModelConfig
from vidlang.corpus import SyntheticSpec, generate_synthetic
from vidlang.train import make_task_model


def tiny_dataset(seed=0, **over):
    base = dict(
        channels=8, frames=3, candidate_count=6, concepts_min=1, concepts_max=2,
        train_clips=6, val_clips=2, test_clips=2, seed=seed,
    )
    base.update(over)
    return generate_synthetic(SyntheticSpec(**base))


def tiny_model_config(dataset, **over):
    base = dict(
        channels=dataset.spec.channels,
        attn_channels=3,
        candidates=len(dataset.candidate_words),
        top_k=3,
        vocab_size=len(dataset.vocabulary),
        embed_dim=6,
        hidden=8,
        depth=1,
        sketch_dim=16,
        maxout_dim=6,
    )
    base.update(over)
    return ModelConfig(**base).validate()


def candidate_ids(dataset):
    return np.array([dataset.vocabulary.id_of(w) for w in dataset.candidate_words])


def build(task, dataset, seed=0, **cfg_over):
    cfg = tiny_model_config(dataset, **cfg_over)
    return make_task_model(task, cfg, candidate_ids(dataset), dataset.candidate_words, seed)


def first_example(dataset, split="train"):
    from vidlang.train import dataset_examples

    return dataset_examples(dataset, split)[0]


def directional_derivative_check(loss_fn, params, rel_tol=1e-5, seed=0):
    """Whole-gradient check in one random direction: compares the autodiff
    directional derivative with a central difference of the loss."""
    from vidlang import tensor as T

    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        loss = loss_fn()
    T.backward(tape, loss)
    rng = np.random.default_rng(seed)
    direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    analytic = sum(
        float(((p.grad if p.grad is not None else 0.0) * direction[k]).sum())
        for k, p in params.items()
    )
    eps = 1e-6
    for k, p in params.items():
        p.data += eps * direction[k]
    up = loss_fn().item()
    for k, p in params.items():
        p.data -= 2 * eps * direction[k]
    down = loss_fn().item()
    for k, p in params.items():
        p.data += eps * direction[k]
    numeric = (up - down) / (2 * eps)
    denom = max(1.0, abs(analytic), abs(numeric))
    return abs(analytic - numeric) / denom
