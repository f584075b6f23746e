"""Finite-difference gradient check for each provider kind on the toy backbone (float64)."""
from __future__ import annotations

import argparse
import tempfile

import torch

from promptmatch.backbone import ToyBackbone
from promptmatch.prompting import parameter_groups
from promptmatch.synthetic import write_synthetic_split
from promptmatch.training import ImageCache, TrainConfig, grad_check, make_provider


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--entries", type=int, default=32)
    ap.add_argument("--eps", type=float, default=1e-5)
    ap.add_argument("--t", type=int, default=261, help="diffusion timestep for the loss")
    args = ap.parse_args()
    torch.set_num_threads(1)
    backbone = ToyBackbone()
    with tempfile.TemporaryDirectory() as tmp:
        split = write_synthetic_split(tmp, n_pairs=2, seed=1)
        for kind in ("single", "class", "cpm"):
            cfg = TrainConfig(image_size=64, provider=kind, t_train=args.t)
            prov = make_provider(cfg, backbone, split.categories)
            cache = ImageCache(split.root, cfg.image_size)
            res = grad_check(prov, backbone, [cache.prepare(p) for p in split.pairs], cfg, n_entries=args.entries, eps=args.eps)
            worst = {}
            for name, _, _, _, rel in res.entries:
                g = name.split(".")[0].split("[")[0]
                worst[g] = max(worst.get(g, 0.0), rel)
            print(f"{kind:6s} max rel err {res.max_rel_err:.2e}  |grad| {res.grad_norm:.3e}")
            for g in parameter_groups(prov):
                print(f"    {g:14s} {worst.get(g, float('nan')):.2e}")


if __name__ == "__main__":
    main()
