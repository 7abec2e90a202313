"""featx command line: frame directory in, CTFV feature file out."""

from __future__ import annotations

import argparse
import sys

from .backbones import make_backbone
from .extract import extract


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="featx", description="Extract CNN feature grids from video frames."
    )
    parser.add_argument("frames_dir")
    parser.add_argument("out_path")
    parser.add_argument("--stride", type=int, default=10)
    parser.add_argument("--max-frames", type=int, default=40)
    parser.add_argument(
        "--backbone", default="resnet50",
        choices=("resnet50", "resnet50-untrained", "mini"),
    )
    parser.add_argument("--seed", type=int, default=0, help="seed for the mini backbone")
    args = parser.parse_args(argv)
    try:
        # Validate the frame directory before paying for backbone setup
        # (the pretrained ResNet may download weights).
        from .extract import sample_frame_paths

        sample_frame_paths(args.frames_dir, args.stride, args.max_frames)
        backbone = make_backbone(args.backbone, seed=args.seed)
        count = extract(
            args.frames_dir, args.out_path, backbone,
            stride=args.stride, max_frames=args.max_frames,
        )
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {count} frames x {backbone.channels} channels to {args.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
