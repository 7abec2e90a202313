"""Command-line interface: dataset generation, training, detection,
evaluation, ensembling, similarity matrices, and the gradient-check suite.

Exit codes: 0 success, 1 usage error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import corpus, metrics, nn, tensor as T
from .concept import detect
from .config import apply_kv, as_kv, format_kv, parse_kv, run_metadata
from .corpus import EOS, SyntheticSpec, generate_synthetic, load_dataset, write_dataset
from .errors import FormatError, InputError, UsageError, VidlangError
from .gradcheck import CHECKS, run_gradcheck
from .models import mc_score, retrieval_score, similarity_matrix
from .models.retrieval import SimilarityMatrix
from .train import TrainConfig, dataset_examples, make_task_model, train

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="vidlang", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--precision", choices=("f32", "f64"), default="f32")
        p.add_argument("--config", type=Path, help="flat key=value config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one config key",
        )

    p = sub.add_parser("gen", help="generate a synthetic planted-concept dataset")
    common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train one task model")
    common(p)
    p.add_argument("--task", choices=("desc", "fib", "mc", "ret"), default="desc")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("detect", help="emit concept words for every clip")
    common(p)
    p.add_argument("--task", choices=("desc", "fib", "mc", "ret"), default="desc")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=None, help="defaults to the config top_k")
    p.add_argument("--out", type=Path, help="JSON lines output; stdout when omitted")

    p = sub.add_parser("eval", help="compute a metric and print JSON")
    common(p)
    p.add_argument("--metric", choices=("acc", "recall", "medr", "bleu"), required=True)
    p.add_argument("--matrix", type=Path, help="similarity matrix (recall/medr)")
    p.add_argument(
        "--queries-on", choices=("rows", "cols"), default="rows",
        help="which matrix axis holds the queries",
    )
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--pred", type=Path, help="predictions, one per line (acc/bleu)")
    p.add_argument("--gold", type=Path, help="ground truths, one per line (acc/bleu)")
    p.add_argument("--out", type=Path, help="write the JSON report here too")

    p = sub.add_parser("ensemble", help="average similarity matrices or .npy arrays")
    common(p)
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of task losses")
    common(p)
    p.add_argument("--model", choices=CHECKS + ("all",), default="all")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)

    p = sub.add_parser("simmatrix", help="dense clip-sentence score table")
    common(p)
    p.add_argument("--task", choices=("ret", "mc"), default="ret")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)

    return parser


def _overrides(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if args.config:
        values.update(parse_kv(Path(args.config).read_text()))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _emit(report: dict, out: Path | None) -> None:
    text = json.dumps(report, indent=2)
    print(text)
    if out:
        out.write_text(text + "\n")


def _load_trained(args, overrides):
    """Rebuild a task model shell from the saved config and load weights."""
    dataset = load_dataset(args.data)
    config = TrainConfig(task=args.task, seed=args.seed)
    saved = args.checkpoint.parent / "config.cfg"
    if saved.exists():
        apply_kv(config, parse_kv(saved.read_text()))
    apply_kv(config, overrides)
    cfg = config.model_config(len(dataset.vocabulary))
    cfg.candidates = len(dataset.candidate_words)
    candidate_ids = np.array(
        [dataset.vocabulary.id_of(w) for w in dataset.candidate_words]
    )
    model = make_task_model(
        config.task, cfg, candidate_ids, dataset.candidate_words, config.seed
    )
    nn.load_into(model.parameters(), args.checkpoint)
    return dataset, config, model


def cmd_gen(args) -> int:
    spec = SyntheticSpec(seed=args.seed)
    apply_kv(spec, _overrides(args))
    dataset = generate_synthetic(spec)
    write_dataset(dataset, args.out)
    _emit(
        {
            "command": "gen",
            "clips": len(dataset.clips),
            "vocabulary": len(dataset.vocabulary),
            "candidates": len(dataset.candidate_words),
            "out": str(args.out),
            "metadata": run_metadata(spec.seed, spec, args.threads, args.precision),
        },
        None,
    )
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    config = TrainConfig(task=args.task, seed=args.seed, precision=args.precision)
    apply_kv(config, _overrides(args))
    config.task = args.task
    outcome = train(dataset, config, out_dir=args.out)
    (args.out / "config.cfg").write_text(format_kv(as_kv(config)))
    report = {
        "command": "train",
        "task": config.task,
        "epochs_run": len({row["epoch"] for row in outcome.history}),
        "best_epoch": outcome.best_epoch,
        "best_metric": outcome.best_metric,
        "checkpoint": str(args.out / "checkpoint.ctsn"),
        "metadata": run_metadata(config.seed, config, args.threads, args.precision),
    }
    _emit(report, args.out / "run.json")
    return 0


def cmd_detect(args) -> int:
    dataset, config, model = _load_trained(args, _overrides(args))
    k = args.k if args.k is not None else model.config.top_k
    clips = [
        corpus.FeatureClip(c.clip_id, c.features) for c in dataset.split(args.split)
    ]

    def detect_one(clip):
        found = detect(clip, model.concept, k)
        return {
            "clip_id": clip.clip_id,
            "words": [
                {"word": model.concept.candidate_words[int(ci)], "confidence": float(conf)}
                for ci, conf in zip(found.candidate_indices, found.confidences)
            ],
        }

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            rows = list(pool.map(detect_one, clips))
    else:
        rows = [detect_one(c) for c in clips]
    lines = "".join(json.dumps(r) + "\n" for r in rows)
    if args.out:
        args.out.write_text(lines)
    else:
        sys.stdout.write(lines)
    return 0


def _read_lines(path: Path) -> list[str]:
    return [line for line in path.read_text().splitlines() if line.strip()]


def cmd_eval(args) -> int:
    report = {
        "metric": args.metric,
        "metadata": run_metadata(args.seed, None, args.threads, args.precision),
    }
    if args.metric in ("recall", "medr"):
        if not args.matrix:
            raise UsageError(f"--matrix is required for {args.metric}")
        matrix = SimilarityMatrix.load(args.matrix)
        if args.queries_on == "cols":
            matrix = matrix.transposed()
        if args.metric == "recall":
            report["k"] = args.k
            report["value"] = metrics.recall_at_k(matrix, args.k)
        else:
            report["value"] = metrics.median_rank(matrix)
    elif args.metric == "acc":
        if not (args.pred and args.gold):
            raise UsageError("--pred and --gold are required for acc")
        report["value"] = metrics.accuracy(_read_lines(args.pred), _read_lines(args.gold))
    else:
        if not (args.pred and args.gold):
            raise UsageError("--pred and --gold are required for bleu")
        cands = [line.split() for line in _read_lines(args.pred)]
        refs = [[line.split()] for line in _read_lines(args.gold)]
        report["n"] = args.n
        report["value"] = metrics.bleu(cands, refs, args.n)
    _emit(report, args.out)
    return 0


def cmd_ensemble(args) -> int:
    from .train import ensemble

    if all(p.suffix == ".npy" for p in args.inputs):
        members = [np.load(p) for p in args.inputs]
        mean = ensemble(members)
        np.save(args.out, mean)
    else:
        members = [SimilarityMatrix.load(p) for p in args.inputs]
        mean = ensemble(members)
        mean.save(args.out)
    _emit(
        {
            "command": "ensemble",
            "members": len(args.inputs),
            "out": str(args.out),
            "metadata": run_metadata(args.seed, None, args.threads, args.precision),
        },
        None,
    )
    return 0


def cmd_gradcheck(args) -> int:
    targets = CHECKS if args.model == "all" else (args.model,)
    all_passed = True
    for name in targets:
        report = run_gradcheck(name, step=args.step, tolerance=args.tolerance, seed=args.seed)
        status = "pass" if report.passed else "FAIL"
        print(f"{name}: max rel err {report.max_rel_err:.3e} [{status}]")
        all_passed &= report.passed
    return 0 if all_passed else 1


def cmd_simmatrix(args) -> int:
    dataset, config, model = _load_trained(args, _overrides(args))
    examples = dataset_examples(dataset, args.split)
    clips = [ex.clip for ex in examples]
    sentences = [
        (ex.clip.clip_id, [t for t in ex.gold_ids if t != EOS]) for ex in examples
    ]
    if args.task == "ret":
        scorer = lambda clip, ids: retrieval_score(model, clip, ids)[0]
    else:
        scorer = lambda clip, ids: mc_score(model, clip, ids)[0]

    if args.threads > 1:
        table = np.zeros((len(clips), len(sentences)), dtype=np.float32)

        def row(i):
            return [scorer(clips[i], ids).item() for _, ids in sentences]

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            for i, values in enumerate(pool.map(row, range(len(clips)))):
                table[i] = values
        matrix = SimilarityMatrix(
            [c.clip_id for c in clips], [sid for sid, _ in sentences], table
        )
    else:
        matrix = similarity_matrix(clips, sentences, scorer)
    matrix.save(args.out)
    _emit(
        {
            "command": "simmatrix",
            "rows": len(matrix.row_ids),
            "cols": len(matrix.col_ids),
            "out": str(args.out),
            "metadata": run_metadata(args.seed, config, args.threads, args.precision),
        },
        None,
    )
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "gradcheck": cmd_gradcheck,
    "simmatrix": cmd_simmatrix,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help()
        return USAGE_EXIT
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return USAGE_EXIT
        T.set_default_dtype(args.precision)
        try:
            return HANDLERS[args.command](args)
        finally:
            T.set_default_dtype("f32")
    except (UsageError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except VidlangError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
