"""Tune each conditional-prompt ablation variant briefly on synthetic pairs and report PCK.

A toy-scale counterpart to the component ablation; numbers only show that
each variant trains end to end, not how the variants rank at full scale.
"""
from __future__ import annotations

import argparse
import tempfile

import torch

from promptmatch.backbone import ToyBackbone
from promptmatch.synthetic import write_synthetic_split
from promptmatch.training import TrainConfig, train, validate_pck

VARIANTS = {
    "full": {},
    "no_global_prompt": {"use_global_prompt": False},
    "no_gn": {"use_gn": False},
    "global_features": {"cpm_features": "global"},
    "individual": {"cpm_conditioning": "individual"},
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--pairs", type=int, default=8)
    args = ap.parse_args()
    torch.set_num_threads(1)
    backbone = ToyBackbone()
    with tempfile.TemporaryDirectory() as tmp:
        train_split = write_synthetic_split(f"{tmp}/train", "train", n_pairs=args.pairs, seed=0)
        test_split = write_synthetic_split(f"{tmp}/test", "test", n_pairs=args.pairs, seed=1)
        for name, flags in VARIANTS.items():
            cfg = TrainConfig(provider="cpm", image_size=64, steps=args.steps, batch_pairs=4, t_train=50, t_infer=50, **flags)
            res = train(train_split, cfg, backbone)
            print(f"{name:18s} final loss {res.history[-1].loss:.3f}  test PCK@0.1 {validate_pck(test_split, res.provider, backbone, cfg):.3f}")


if __name__ == "__main__":
    main()
