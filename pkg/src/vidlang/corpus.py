"""Vocabulary construction, caption encoding, feature-file I/O, and the
planted-concept synthetic corpus that makes desk-scale verification possible.

Feature files ("CTFV") are bit-exact: magic, version u32 LE, then N, H,
W, C as u32 LE, then N*H*W*C float32 LE values, row-major, frame-major.
Dataset manifests are JSON lines with at least clip/caption/planted/split.
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

logger = logging.getLogger(__name__)

PAD, EOS, UNK, BLANK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<EOS>", "<UNK>", "<blank>")

FEATURE_MAGIC = b"CTFV"
FEATURE_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9<>]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    words: list[str]
    index: dict[str, int]
    freqs: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self.index.get(word, UNK)

    def word_of(self, idx: int) -> str:
        return self.words[idx]

    @classmethod
    def from_words(cls, words: list[str], freqs: dict[str, int] | None = None) -> "Vocabulary":
        all_words = list(RESERVED_TOKENS) + list(words)
        index = {w: i for i, w in enumerate(all_words)}
        if len(index) != len(all_words):
            raise UsageError("duplicate words in vocabulary")
        return cls(all_words, index, freqs or {})


def build_vocab(captions: list[list[str]], min_count: int = 4) -> Vocabulary:
    """Frequency-filtered vocabulary: words occurring more than three times.

    Ids are dense, reserved tokens first, then descending frequency with
    lexicographic tie-breaks. On a full movie-description corpus this rule
    yields a vocabulary in the 12k range; synthetic corpora stay tiny.
    """
    if not captions:
        raise UsageError("build_vocab requires a non-empty corpus")
    freqs: dict[str, int] = {}
    for tokens in captions:
        for tok in tokens:
            freqs[tok] = freqs.get(tok, 0) + 1
    kept = sorted(
        (w for w, c in freqs.items() if c >= min_count),
        key=lambda w: (-freqs[w], w),
    )
    return Vocabulary.from_words(kept, freqs)


def select_candidates(words: list[str], freqs: dict[str, int], count: int) -> list[str]:
    """Top ``count`` words by frequency, lexicographic on ties."""
    pool = sorted(set(words), key=lambda w: (-freqs.get(w, 0), w))
    if len(pool) < count:
        logger.warning("only %d candidate words available, wanted %d", len(pool), count)
        return pool
    return pool[:count]


def encode_caption(tokens: list[str] | str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Token ids with <UNK> substitution and <EOS>, padded/truncated to max_len."""
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    ids = [vocab.id_of(t) for t in tokens]
    ids = ids[: max_len - 1] + [EOS]
    ids.extend([PAD] * (max_len - len(ids)))
    return ids


def decode_caption(ids: list[int], vocab: Vocabulary) -> list[str]:
    out = []
    for idx in ids:
        if idx == EOS:
            break
        if idx == PAD:
            continue
        out.append(vocab.word_of(idx))
    return out


# ---------------------------------------------------------------------------
# feature clips


@dataclass
class FeatureClip:
    """One video as a sequence of spatial feature grids (N, H, W, C)."""

    clip_id: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise UsageError(f"FeatureClip needs (N, H, W, C) frames, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def subsample_indices(n: int, n_max: int) -> list[int]:
    """Uniform frame subsampling rule: floor(i * n / n_max)."""
    if n <= n_max:
        return list(range(n))
    return [i * n // n_max for i in range(n_max)]


def write_features(clip: FeatureClip, path) -> None:
    n, h, w, c = clip.frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIII", FEATURE_VERSION, n, h, w, c))
        fh.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def load_features(path, n_max: int = 40) -> FeatureClip:
    """Load a CTFV file; clips longer than n_max are uniformly subsampled."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic in {path.name}", offset=0)
    if len(blob) < 24:
        raise FormatError("truncated feature header", offset=len(blob))
    version, n, h, w, c = struct.unpack("<IIIII", blob[4:24])
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature version {version}", offset=4)
    expected = 24 + 4 * n * h * w * c
    if len(blob) != expected:
        raise FormatError(
            f"feature payload is {len(blob) - 24} bytes, expected {expected - 24}",
            offset=min(len(blob), expected),
        )
    frames = np.frombuffer(blob, dtype="<f4", offset=24).reshape(n, h, w, c).copy()
    if n > n_max:
        frames = frames[subsample_indices(n, n_max)]
    return FeatureClip(path.stem, frames)


# ---------------------------------------------------------------------------
# synthetic planted-concept corpus


@dataclass
class SyntheticSpec:
    """Recipe for a planted-concept dataset; reproducible from the seed."""

    grid_h: int = 4
    grid_w: int = 4
    channels: int = 8
    frames: int = 6
    candidate_count: int = 12
    concepts_min: int = 1
    concepts_max: int = 3
    filler_count: int = 8
    noise: float = 0.1
    seed: int = 0
    train_clips: int = 120
    val_clips: int = 30
    test_clips: int = 30


_WORD_BANK = [
    "wolf", "door", "river", "cloud", "horse", "stone", "bird", "lamp",
    "car", "tree", "boat", "fire", "glass", "chair", "bell", "coin",
    "kite", "mouse", "piano", "rope", "shell", "train", "wheel", "apple",
    "brick", "candle", "drum", "eagle", "fence", "grape", "hammer", "island",
]

_FILLER_BANK = [
    "a", "appears", "meets", "near", "the", "then", "quietly", "outside",
    "slowly", "again", "beside", "above",
]


@dataclass
class SyntheticClip:
    clip_id: str
    features: np.ndarray
    planted: list[str]
    caption: str
    split: str
    fib_sentence: str
    fib_answer: str
    mc_choices: list[str]
    mc_answer: int
    # per planted word, the (row, col) cell carrying its signature each frame
    cells: list[list[tuple[int, int]]] = field(default_factory=list)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    clips: list[SyntheticClip]
    candidate_words: list[str]
    filler_words: list[str]
    signatures: dict[str, np.ndarray]
    vocabulary: Vocabulary

    def split(self, name: str) -> list[SyntheticClip]:
        return [c for c in self.clips if c.split == name]


def _template_caption(words: list[str]) -> str:
    ordered = sorted(words)
    if len(ordered) == 1:
        return f"a {ordered[0]} appears"
    if len(ordered) == 2:
        return f"a {ordered[0]} meets a {ordered[1]}"
    return f"a {ordered[0]} meets a {ordered[1]} near a {ordered[2]}"


def _walk(rng: np.random.Generator, gh: int, gw: int, start: tuple[int, int], steps: int):
    cells = [start]
    r, c = start
    for _ in range(steps - 1):
        dr, dc = rng.integers(-1, 2), rng.integers(-1, 2)
        r = int(np.clip(r + dr, 0, gh - 1))
        c = int(np.clip(c + dc, 0, gw - 1))
        cells.append((r, c))
    return cells


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Plant concept signatures on random grid walks with background noise.

    Each clip plants concepts_min..concepts_max concept words. The caption
    is a deterministic template over the sorted planted words; the
    fill-in-the-blank variant blanks one planted word; the multiple-choice
    variant adds four distractor captions built from disjoint word sets.
    """
    if spec.concepts_max > spec.candidate_count:
        raise UsageError("concepts per clip cannot exceed the candidate count")
    if spec.concepts_min < 1 or spec.concepts_min > spec.concepts_max:
        raise UsageError("need 1 <= concepts_min <= concepts_max")
    rng = np.random.default_rng(spec.seed)

    bank = list(_WORD_BANK)
    while len(bank) < spec.candidate_count:
        bank.append(f"obj{len(bank):03d}")
    candidates = sorted(bank[: spec.candidate_count])
    filler_bank = list(_FILLER_BANK)
    while len(filler_bank) < spec.filler_count:
        filler_bank.append(f"word{len(filler_bank):03d}")
    fillers = sorted(filler_bank[: spec.filler_count])

    signatures = {}
    for word in candidates:
        vec = rng.standard_normal(spec.channels)
        signatures[word] = (vec / np.linalg.norm(vec)).astype(np.float32)

    vocab = Vocabulary.from_words(sorted(set(candidates) | set(fillers)))

    clips: list[SyntheticClip] = []
    splits = [("train", spec.train_clips), ("val", spec.val_clips), ("test", spec.test_clips)]
    counter = 0
    for split_name, count in splits:
        for _ in range(count):
            n_concepts = int(rng.integers(spec.concepts_min, spec.concepts_max + 1))
            planted = sorted(rng.choice(candidates, size=n_concepts, replace=False).tolist())
            features = rng.normal(
                0.0, spec.noise, size=(spec.frames, spec.grid_h, spec.grid_w, spec.channels)
            ).astype(np.float32)
            starts = rng.choice(spec.grid_h * spec.grid_w, size=n_concepts, replace=False)
            walks = []
            for word, flat in zip(planted, starts):
                start = (int(flat) // spec.grid_w, int(flat) % spec.grid_w)
                walks.append(_walk(rng, spec.grid_h, spec.grid_w, start, spec.frames))
            for t in range(spec.frames):
                taken: set[tuple[int, int]] = set()
                for w_i, word in enumerate(planted):
                    cell = walks[w_i][t]
                    if cell in taken:  # keep one concept per cell per frame
                        free = [
                            (r, c)
                            for r in range(spec.grid_h)
                            for c in range(spec.grid_w)
                            if (r, c) not in taken
                        ]
                        cell = free[int(rng.integers(len(free)))]
                        walks[w_i][t] = cell
                    taken.add(cell)
                    features[t, cell[0], cell[1], :] += signatures[word]

            caption = _template_caption(planted)
            answer = planted[int(rng.integers(len(planted)))]
            fib_tokens = [
                "<blank>" if tok == answer else tok for tok in caption.split()
            ]
            distract_pool = [w for w in candidates if w not in planted]
            choices = [caption]
            for _ in range(4):
                size = int(rng.integers(spec.concepts_min, spec.concepts_max + 1))
                size = min(size, len(distract_pool))
                picked = sorted(rng.choice(distract_pool, size=size, replace=False).tolist())
                choices.append(_template_caption(picked))
            answer_pos = int(rng.integers(5))
            choices[0], choices[answer_pos] = choices[answer_pos], choices[0]

            clips.append(
                SyntheticClip(
                    clip_id=f"clip{counter:05d}",
                    features=features,
                    planted=planted,
                    caption=caption,
                    split=split_name,
                    fib_sentence=" ".join(fib_tokens),
                    fib_answer=answer,
                    mc_choices=choices,
                    mc_answer=answer_pos,
                    cells=[[tuple(cell) for cell in walk] for walk in walks],
                )
            )
            counter += 1
    return SyntheticDataset(spec, clips, candidates, fillers, signatures, vocab)


def write_dataset(dataset: SyntheticDataset, out_dir) -> None:
    """Materialize a synthetic dataset: CTFV features, manifest, word lists."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for clip in dataset.clips:
            rel = f"features/{clip.clip_id}.ctfv"
            write_features(FeatureClip(clip.clip_id, clip.features), out / rel)
            fh.write(
                json.dumps(
                    {
                        "clip": rel,
                        "caption": clip.caption,
                        "planted": clip.planted,
                        "split": clip.split,
                        "fib": {"sentence": clip.fib_sentence, "answer": clip.fib_answer},
                        "mc": {"choices": clip.mc_choices, "answer": clip.mc_answer},
                        "cells": clip.cells,
                    }
                )
                + "\n"
            )
    (out / "candidates.txt").write_text("".join(w + "\n" for w in dataset.candidate_words))
    (out / "vocab.txt").write_text("".join(w + "\n" for w in dataset.vocabulary.words))
    (out / "spec.cfg").write_text(
        "".join(f"{k}={v}\n" for k, v in sorted(vars(dataset.spec).items()))
    )


def read_candidate_file(path) -> list[str]:
    """Candidate-word list: one word per line, blanks ignored."""
    words = [line.strip() for line in Path(path).read_text().splitlines()]
    return [w for w in words if w]


def load_dataset(root) -> SyntheticDataset:
    """Load a dataset previously written by write_dataset."""
    root = Path(root)
    spec = SyntheticSpec()
    from .config import apply_kv, parse_kv  # local import to avoid a cycle

    apply_kv(spec, parse_kv((root / "spec.cfg").read_text()))
    candidates = read_candidate_file(root / "candidates.txt")
    vocab_words = [w for w in (root / "vocab.txt").read_text().splitlines() if w]
    vocab = Vocabulary(vocab_words, {w: i for i, w in enumerate(vocab_words)})
    clips = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        entry = json.loads(line)
        feat = load_features(root / entry["clip"])
        clips.append(
            SyntheticClip(
                clip_id=feat.clip_id,
                features=feat.frames,
                planted=entry["planted"],
                caption=entry["caption"],
                split=entry["split"],
                fib_sentence=entry["fib"]["sentence"],
                fib_answer=entry["fib"]["answer"],
                mc_choices=entry["mc"]["choices"],
                mc_answer=entry["mc"]["answer"],
                cells=[[tuple(c) for c in walk] for walk in entry.get("cells", [])],
            )
        )
    fillers = sorted(
        set(vocab_words[len(RESERVED_TOKENS):]) - set(candidates)
    )
    rng = np.random.default_rng(spec.seed)
    signatures = {}
    for word in sorted(candidates):
        vec = rng.standard_normal(spec.channels)
        signatures[word] = (vec / np.linalg.norm(vec)).astype(np.float32)
    return SyntheticDataset(spec, clips, candidates, fillers, signatures, vocab)
