"""Strided frame sampling and CTFV feature-file writing.

CTFV layout (must stay bit-compatible with the core loader): magic
"CTFV", then version, N, H, W, C as u32 LE, then N*H*W*C float32 LE
values, row-major within each frame, frames in order.
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"CTFV"
FEATURE_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def write_ctfv(frames: np.ndarray, out_path) -> None:
    """Atomic CTFV write (temp file + rename)."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) features, got shape {frames.shape}")
    n, h, w, c = frames.shape
    out_path = Path(out_path)
    fd, tmp = tempfile.mkstemp(dir=out_path.parent, suffix=".ctfv.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<IIIII", FEATURE_VERSION, n, h, w, c))
            fh.write(frames.tobytes())
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sample_frame_paths(frames_dir, stride: int = 10, max_frames: int = 40) -> list[Path]:
    """Every stride-th frame in name order, then uniform thinning to the cap.

    The thinning rule (floor(i * n / max_frames)) matches the core loader's
    subsampling, so over-long directories behave like over-long clips.
    """
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"{frames_dir} is not a directory")
    all_frames = sorted(
        p for p in frames_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not all_frames:
        raise ValueError(f"no frame images found in {frames_dir}")
    picked = all_frames[::stride]
    if len(picked) > max_frames:
        picked = [picked[i * len(picked) // max_frames] for i in range(max_frames)]
    return picked


def extract(
    frames_dir,
    out_path,
    backbone,
    stride: int = 10,
    max_frames: int = 40,
) -> int:
    """Encode sampled frames and write a CTFV file; returns the frame count.

    Unreadable images are skipped with a warning; an empty result is an error.
    """
    if stride < 1 or max_frames < 1:
        raise ValueError("stride and max_frames must be positive")
    grids = []
    for path in sample_frame_paths(frames_dir, stride, max_frames):
        try:
            with Image.open(path) as image:
                grids.append(backbone.encode(image))
        except (OSError, UnidentifiedImageError) as exc:
            logger.warning("skipping unreadable frame %s: %s", path.name, exc)
    if not grids:
        raise ValueError(f"no readable frames in {frames_dir}")
    write_ctfv(np.stack(grids), out_path)
    return len(grids)
