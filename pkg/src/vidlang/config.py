"""Model configuration, flat key=value config files, and run metadata."""

from __future__ import annotations

import dataclasses
import hashlib
import subprocess
from dataclasses import dataclass

from .errors import UsageError


@dataclass
class ModelConfig:
    """Shared shape configuration for the detector and task models.

    The detector's tracing LSTM hidden width must equal ``channels``; the
    trace attention multiplies hidden states into feature cells
    elementwise, so other combinations are rejected at build time.
    """

    grid_h: int = 4
    grid_w: int = 4
    channels: int = 8          # reduced feature channels, also detector hidden width
    attn_channels: int = 8     # mid width of the two-conv attention scorer
    candidates: int = 12       # concept candidate vocabulary size
    top_k: int = 3             # concept words handed to the language heads
    vocab_size: int = 50
    embed_dim: int = 8
    hidden: int = 16           # language-side LSTM width
    depth: int = 2             # language-side LSTM stack depth
    trace_depth: int = 1
    sketch_dim: int = 64       # compact bilinear output width (retrieval)
    maxout_dim: int = 16       # maxout output width (retrieval)
    max_caption_len: int = 12
    n_max: int = 40            # frame cap on loaded clips

    @property
    def trace_count(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> "ModelConfig":
        if self.top_k > self.candidates:
            raise UsageError(
                f"top_k {self.top_k} exceeds candidate count {self.candidates}"
            )
        for name in ("grid_h", "grid_w", "channels", "hidden", "embed_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        return self


def _coerce(raw: str, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean from {raw!r}")
    return typ(raw)


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat key=value lines; '#' starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))


def apply_kv(instance, values: dict[str, str], ignore_unknown: bool = False):
    """Overlay key=value strings onto a dataclass instance, coercing types."""
    fields = {f.name: f for f in dataclasses.fields(instance)}
    for key, raw in values.items():
        if key not in fields:
            if ignore_unknown:
                continue
            raise UsageError(f"unknown config key {key!r}")
        typ = fields[key].type
        if isinstance(typ, str):
            typ = {"int": int, "float": float, "str": str, "bool": bool}.get(typ, str)
        setattr(instance, key, _coerce(raw, typ))
    return instance


def as_kv(instance) -> dict[str, str]:
    return {f.name: str(getattr(instance, f.name)) for f in dataclasses.fields(instance)}


def config_hash(instance) -> str:
    return hashlib.sha256(format_kv(as_kv(instance)).encode()).hexdigest()[:16]


def git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def run_metadata(seed: int, config=None, threads: int = 1, precision: str = "f32") -> dict:
    """Provenance block embedded in every CLI output."""
    meta = {
        "seed": seed,
        "threads": threads,
        "precision": precision,
        "git_revision": git_revision(),
    }
    if config is not None:
        meta["config_hash"] = config_hash(config)
    return meta
