"""Adam optimizer, per-task training loops, detector transfer, ensembling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, tensor as T
from .config import ModelConfig
from .corpus import EOS, FeatureClip, SyntheticDataset, tokenize
from .errors import UsageError
from .metrics import gt_ranks
from .models import (
    concept_targets, describe, description_loss, fib_answer_id, fib_loss,
    fib_predict, make_description_model, make_fib_model, make_mc_model,
    make_retrieval_model, mc_loss, mc_score_choices, retrieval_loss,
    run_prologue,
)
from .models.retrieval import SimilarityMatrix, encode_query, fusion_score
from .tensor import Tensor

logger = logging.getLogger(__name__)

TASKS = ("desc", "fib", "mc", "ret")


@dataclass
class TrainConfig:
    """Hyperparameters plus the model shape; margins default to 1 (multiple
    choice) and 3 (retrieval)."""

    task: str = "desc"
    lr: float = 1e-4
    lambda1: float = 1e-3
    lambda2: float = 1.0
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    dropout: float = 0.2
    margin_mc: float = 1.0
    margin_ret: float = 3.0
    top_k: int = 3
    candidates: int = 12
    hidden: int = 16
    embed_dim: int = 8
    channels: int = 8
    attn_channels: int = 8
    depth: int = 2
    trace_depth: int = 1
    sketch_dim: int = 64
    maxout_dim: int = 16
    max_caption_len: int = 12
    grad_clip: float = 5.0          # global-norm clip; 0 disables
    patience: int = 5               # early stopping; 0 disables
    transfer: str = ""              # optional detector checkpoint
    precision: str = "f32"

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            attn_channels=self.attn_channels,
            candidates=self.candidates,
            top_k=self.top_k,
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden=self.hidden,
            depth=self.depth,
            trace_depth=self.trace_depth,
            sketch_dim=self.sketch_dim,
            maxout_dim=self.maxout_dim,
            max_caption_len=self.max_caption_len,
        ).validate()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, Tensor], lr: float) -> AdamState:
    state = AdamState(lr=lr)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; grads are consumed and cleared."""
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / b1c
        v_hat = state.v[name] / b2c
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
        p.zero_grad()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# model construction and transfer


def make_task_model(task: str, cfg: ModelConfig, candidate_vocab_ids, candidate_words, seed):
    makers = {
        "desc": make_description_model,
        "fib": make_fib_model,
        "mc": make_mc_model,
        "ret": make_retrieval_model,
    }
    if task not in makers:
        raise UsageError(f"unknown task {task!r}; expected one of {TASKS}")
    return makers[task](cfg, candidate_vocab_ids, candidate_words, seed)


def transfer_detector(params: dict[str, Tensor], checkpoint_path) -> None:
    """Load detector.* tensors from a source checkpoint into a fresh model."""
    detector_params = {k: v for k, v in params.items() if k.startswith("detector.")}
    if not detector_params:
        raise UsageError("model has no detector parameters to transfer into")
    nn.load_into(detector_params, checkpoint_path, subset=False)


# ---------------------------------------------------------------------------
# examples and per-task losses


@dataclass
class Example:
    clip: FeatureClip
    caption_tokens: list[str]
    gold_ids: list[int]            # desc: EOS-terminated caption ids
    fib_ids: list[int]
    fib_gold: int
    mc_choice_ids: list[list[int]]
    mc_answer: int


def dataset_examples(dataset: SyntheticDataset, split: str) -> list[Example]:
    vocab = dataset.vocabulary
    out = []
    for clip in dataset.split(split):
        tokens = tokenize(clip.caption)
        gold = [vocab.id_of(t) for t in tokens] + [EOS]
        fib_tokens = tokenize(clip.fib_sentence)
        out.append(
            Example(
                clip=FeatureClip(clip.clip_id, clip.features),
                caption_tokens=tokens,
                gold_ids=gold,
                fib_ids=[vocab.id_of(t) for t in fib_tokens],
                fib_gold=vocab.id_of(clip.fib_answer),
                mc_choice_ids=[
                    [vocab.id_of(t) for t in tokenize(c)] for c in clip.mc_choices
                ],
                mc_answer=clip.mc_answer,
            )
        )
    return out


def example_loss(task, model, ex: Example, config: TrainConfig, training, rng):
    if task == "desc":
        result = describe(
            model, ex.clip, mode="teacher_forced", gold_ids=ex.gold_ids,
            training=training, dropout_rate=config.dropout, rng=rng,
        )
        targets = concept_targets(model.concept, ex.caption_tokens)
        return description_loss(result, ex.gold_ids, targets, config.lambda1, config.lambda2)
    if task == "fib":
        result = fib_predict(
            model, ex.clip, ex.fib_ids,
            training=training, dropout_rate=config.dropout, rng=rng,
        )
        targets = concept_targets(model.concept, ex.caption_tokens)
        return fib_loss(result, ex.fib_gold, targets, config.lambda1, config.lambda2)
    if task == "mc":
        scores, stacks, pro = mc_score_choices(
            model, ex.clip, ex.mc_choice_ids,
            training=training, dropout_rate=config.dropout, rng=rng,
        )
        targets = concept_targets(model.concept, ex.caption_tokens)
        return mc_loss(
            scores, ex.mc_answer, stacks, pro.confidence, targets,
            margin=config.margin_mc, lambda1=config.lambda1, lambda2=config.lambda2,
        )
    raise UsageError(f"example_loss does not handle task {task!r}")


def retrieval_batch_loss(model, batch: list[Example], config: TrainConfig, training, rng):
    """In-batch hinge: each query ranks every clip in the batch."""
    if len(batch) < 2:
        raise UsageError("retrieval training needs batches of at least 2")
    prologues = [
        run_prologue(
            model.concept, model.encoder, ex.clip, model.config.top_k,
            training, config.dropout, rng,
        )
        for ex in batch
    ]
    total = None
    for k, query_ex in enumerate(batch):
        row, stacks = [], []
        query_ids = [i for i in query_ex.gold_ids if i != EOS]
        for pro in prologues:
            q_state, gamma = encode_query(
                model, pro, query_ids, training, config.dropout, rng
            )
            row.append(fusion_score(model, pro.video_state, q_state, training, rng))
            stacks.append(gamma)
        targets = concept_targets(model.concept, query_ex.caption_tokens)
        loss = retrieval_loss(
            row, k, [stacks[k]], prologues[k].confidence, targets,
            margin=config.margin_ret, lambda1=config.lambda1, lambda2=config.lambda2,
        )
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# evaluation during training


def evaluate_task(task, model, examples: list[Example], config: TrainConfig):
    """Task metric on a split: exact match, accuracy, or negated MedR."""
    if not examples:
        return 0.0
    if task == "desc":
        hits = 0
        for ex in examples:
            result = describe(model, ex.clip, mode="greedy", max_len=config.max_caption_len)
            emitted = [i for i in result.word_ids if i != EOS]
            if emitted == [i for i in ex.gold_ids if i != EOS]:
                hits += 1
        return hits / len(examples)
    if task == "fib":
        hits = sum(
            1
            for ex in examples
            if fib_answer_id(fib_predict(model, ex.clip, ex.fib_ids)) == ex.fib_gold
        )
        return hits / len(examples)
    if task == "mc":
        hits = 0
        for ex in examples:
            scores, _, _ = mc_score_choices(model, ex.clip, ex.mc_choice_ids)
            values = [s.item() for s in scores]
            if int(np.argmax(values)) == ex.mc_answer:
                hits += 1
        return hits / len(examples)
    if task == "ret":
        # Mean rank, not median: continuous, so checkpoint selection can
        # tell apart models the (saturating) median scores identically.
        matrix = retrieval_similarity(model, examples)
        return -float(np.mean(gt_ranks(matrix.transposed().scores)))
    raise UsageError(f"unknown task {task!r}")


def retrieval_similarity(model, examples: list[Example]) -> SimilarityMatrix:
    """Clip-by-sentence score table over one split (pure pairwise scoring)."""
    prologues = [
        run_prologue(model.concept, model.encoder, ex.clip, model.config.top_k)
        for ex in examples
    ]
    table = np.zeros((len(examples), len(examples)), dtype=np.float32)
    for j, ex in enumerate(examples):
        query_ids = [i for i in ex.gold_ids if i != EOS]
        for i, pro in enumerate(prologues):
            q_state, _ = encode_query(model, pro, query_ids)
            table[i, j] = fusion_score(model, pro.video_state, q_state).item()
    return SimilarityMatrix(
        [ex.clip.clip_id for ex in examples],
        [ex.clip.clip_id for ex in examples],
        table,
    )


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainOutcome:
    model: object
    params: dict[str, Tensor]
    history: list[dict]
    best_metric: float
    best_epoch: int


def train(dataset: SyntheticDataset, config: TrainConfig, out_dir=None) -> TrainOutcome:
    """Seeded epoch loop with shuffling, gradient clipping, early stopping.

    Keeps the best-validation-metric parameter snapshot; writes
    checkpoint.ctsn and metrics.csv under out_dir when given.
    """
    if config.task not in TASKS:
        raise UsageError(f"unknown task {config.task!r}")
    T.set_default_dtype(config.precision)
    try:
        cfg = config.model_config(len(dataset.vocabulary))
        candidate_ids = np.array(
            [dataset.vocabulary.id_of(w) for w in dataset.candidate_words]
        )
        if cfg.candidates != len(dataset.candidate_words):
            cfg.candidates = len(dataset.candidate_words)
            cfg.validate()
        model = make_task_model(
            config.task, cfg, candidate_ids, dataset.candidate_words, config.seed
        )
        params = model.parameters()
        if config.transfer:
            transfer_detector(params, config.transfer)
        adam = adam_init(params, config.lr)
        rng = np.random.default_rng(config.seed)
        train_ex = dataset_examples(dataset, "train")
        val_ex = dataset_examples(dataset, "val")
        if not train_ex:
            raise UsageError("dataset has no training split")

        history: list[dict] = []
        best_metric = -np.inf
        best_epoch = -1
        best_snapshot = {k: v.data.copy() for k, v in params.items()}
        stale = 0
        for epoch in range(config.epochs):
            order = rng.permutation(len(train_ex))
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(order), config.batch_size):
                batch = [train_ex[i] for i in order[start : start + config.batch_size]]
                if config.task == "ret" and len(batch) < 2:
                    continue
                with T.Tape() as tape:
                    if config.task == "ret":
                        loss = retrieval_batch_loss(model, batch, config, True, rng)
                    else:
                        total = None
                        for ex in batch:
                            one = example_loss(config.task, model, ex, config, True, rng)
                            total = one if total is None else T.add(total, one)
                        loss = T.mul(total, 1.0 / len(batch))
                T.backward(tape, loss)
                for p in params.values():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                clip_gradients(params, config.grad_clip)
                adam_step(params, adam)
                epoch_loss += loss.item()
                n_batches += 1
            avg_loss = epoch_loss / max(n_batches, 1)
            metric = evaluate_task(config.task, model, val_ex, config)
            history.append(
                {"epoch": epoch, "split": "train", "loss": avg_loss, "metric": ""}
            )
            history.append({"epoch": epoch, "split": "val", "loss": "", "metric": metric})
            logger.info("epoch %d: train loss %.4f, val metric %.4f", epoch, avg_loss, metric)
            if metric > best_metric:
                best_metric = metric
                best_epoch = epoch
                best_snapshot = {k: v.data.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
        for name, p in params.items():
            p.data = best_snapshot[name]
        outcome = TrainOutcome(model, params, history, best_metric, best_epoch)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            nn.save_checkpoint(params, out / "checkpoint.ctsn")
            write_metrics_csv(history, out / "metrics.csv")
        return outcome
    finally:
        T.set_default_dtype("f32")


def write_metrics_csv(history: list[dict], path) -> None:
    lines = ["epoch,split,loss,metric"]
    for row in history:
        lines.append(f"{row['epoch']},{row['split']},{row['loss']},{row['metric']}")
    Path(path).write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# ensembling


def _mean_exactish(arrays: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean that is exact idempotence on identical members and
    bitwise invariant to member order (canonical order, wide accumulator)."""
    first = arrays[0]
    if all(np.array_equal(a, first) for a in arrays[1:]):
        return first.copy()
    ordered = sorted(arrays, key=lambda a: a.tobytes())
    total = np.zeros(first.shape, dtype=np.longdouble)
    for a in ordered:
        total += a
    return (total / len(arrays)).astype(first.dtype)


def ensemble(outputs: list):
    """Elementwise mean of homogeneous outputs.

    Accepts a list of numpy arrays / Tensors (e.g. word distributions) or
    a list of SimilarityMatrix with identical id lists.
    """
    if not outputs:
        raise UsageError("ensemble of nothing")
    if isinstance(outputs[0], SimilarityMatrix):
        first = outputs[0]
        for m in outputs[1:]:
            if not isinstance(m, SimilarityMatrix):
                raise UsageError("cannot mix similarity matrices with other outputs")
            if m.row_ids != first.row_ids or m.col_ids != first.col_ids:
                raise UsageError("ensemble members index different ids")
            if m.scores.shape != first.scores.shape:
                raise UsageError("ensemble members have different shapes")
        mean = _mean_exactish([m.scores for m in outputs])
        return SimilarityMatrix(first.row_ids, first.col_ids, mean)
    arrays = [o.data if isinstance(o, Tensor) else np.asarray(o) for o in outputs]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise UsageError(f"ensemble member shapes differ: {a.shape} vs {shape}")
    return _mean_exactish(arrays)
