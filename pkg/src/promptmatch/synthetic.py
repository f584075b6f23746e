"""Synthetic image pairs with known correspondences, written as a canonical split.

Each pair shows the same set of coloured blobs at different positions over
independent smooth backgrounds; keypoints are the blob centres.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .datasets import DatasetSplit, MatchPair, write_canonical
from .matching import Keypoint


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.uniform(0, 1, (cells, cells, 3)).astype(np.float32)
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def _render(rng, size, centers, colors, radius, background_scale):
    img = background_scale * _smooth_noise(rng, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for (cx, cy), col in zip(centers, colors):
        w = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius**2))[..., None]
        img = img * (1 - w) + col[None, None, :] * w
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_pairs(
    n_pairs: int = 8,
    size: int = 64,
    n_keypoints: int = 6,
    radius: float = 2.5,
    background_scale: float = 0.6,
    seed: int = 0,
    margin: int = 6,
) -> list[tuple[np.ndarray, np.ndarray, list[Keypoint], list[Keypoint], str]]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_pairs):
        colors = rng.uniform(0, 1, (n_keypoints, 3)).astype(np.float32)
        ka = rng.uniform(margin, size - margin, (n_keypoints, 2))
        kb = rng.uniform(margin, size - margin, (n_keypoints, 2))
        a = _render(rng, size, ka, colors, radius, background_scale)
        b = _render(rng, size, kb, colors, radius, background_scale)
        cat = ("disc", "spot")[i % 2]
        out.append((a, b, [Keypoint(*map(float, k)) for k in ka], [Keypoint(*map(float, k)) for k in kb], cat))
    return out


def write_synthetic_split(root: str | Path, name: str = "train", **kwargs) -> DatasetSplit:
    """Render pairs to ``root/images`` and write ``root/<name>.jsonl``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (a, b, ka, kb, cat) in enumerate(make_pairs(**kwargs)):
        pa, pb = f"images/{name}_{i:03d}_a.png", f"images/{name}_{i:03d}_b.png"
        Image.fromarray(a).save(root / pa)
        Image.fromarray(b).save(root / pb)
        h, w = a.shape[:2]
        pairs.append(
            MatchPair(
                pair_id=f"{name}_{i:03d}",
                image_a_path=pa,
                image_b_path=pb,
                keypoints_a=tuple(ka),
                keypoints_b=tuple(kb),
                category=cat,
                original_sizes=((float(w), float(h)), (float(w), float(h))),
                bbox_b=(0.0, 0.0, float(w), float(h)),
            ).validate()
        )
    split = DatasetSplit(tuple(pairs), name, "canonical", str(root))
    write_canonical(split, root / f"{name}.jsonl")
    return split


# Frozen overfit configuration (image_size 64). Clean inputs and a one-cell
# target keep the loss floor at zero; the raised prompt learning rate lets
# 500 steps get there. Reference run on seed 0: smoothed loss ratio 0.10,
# training PCK@0.1 0.479 -> 0.958.
OVERFIT_CONFIG = dict(
    steps=500,
    batch_pairs=8,
    t_train=0,
    t_infer=0,
    kernel_size=1,
    lr_prompt=0.5,
    image_size=64,
    provider="single",
    seed=0,
)
OVERFIT_SMOOTHING = 25


def smoothed(values, window: int = OVERFIT_SMOOTHING) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` values."""
    values = list(values)
    if len(values) < window:
        raise ValueError(f"need at least {window} values, got {len(values)}")
    return sum(values[:window]) / window, sum(values[-window:]) / window
