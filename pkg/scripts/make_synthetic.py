"""Render a synthetic canonical split (coloured blobs with known correspondences)."""
from __future__ import annotations

import argparse

from promptmatch.synthetic import write_synthetic_split


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("--name", default="train")
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--keypoints", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    split = write_synthetic_split(args.out, args.name, n_pairs=args.pairs, size=args.size, n_keypoints=args.keypoints, seed=args.seed)
    print(f"wrote {len(split)} pairs to {args.out}/{args.name}.jsonl")


if __name__ == "__main__":
    main()
