"""Extract per-frame CNN feature grids from frame directories into CTFV files."""

from .extract import extract, sample_frame_paths, write_ctfv

__version__ = "0.1.0"
__all__ = ["extract", "sample_frame_paths", "write_ctfv"]
