"""Acceptance suite: one check per primary criterion, each at its stated tolerance.

Run under pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from test_evaluation import _brute, _lookup, _random_fixture  # noqa: E402
from test_prompting import _hand_cpm  # noqa: E402

from promptmatch.backbone import PositionalBackbone, ToyBackbone, build_schedule, corrupt  # noqa: E402
from promptmatch.datasets import MatchPair, read_canonical, write_canonical  # noqa: E402
from promptmatch.evaluation import evaluate_split, pck_pair  # noqa: E402
from promptmatch.matching import (  # noqa: E402
    FeatureMap,
    Keypoint,
    correlation_map,
    l2_normalize,
    make_ground_truth,
    matching_loss,
    sample_features,
    softmax_2d,
)
from promptmatch.prompting import CpmConfig, CpmParameters, adaptive_max_pool, cpm_forward, parameter_groups  # noqa: E402
from promptmatch.synthetic import OVERFIT_CONFIG, smoothed, write_synthetic_split  # noqa: E402
from promptmatch.training import (  # noqa: E402
    ImageCache,
    TrainConfig,
    grad_check,
    load_checkpoint,
    make_provider,
    match_pair,
    train,
    validate_pck,
)

RESULTS: list[str] = []

# Pure-python cumulative product of the default scaled-linear schedule, steps 0..260.
ALPHA_BAR_260 = 0.6573230089158867


def _elapsed(t0):
    return time.perf_counter() - t0


def check_normalization_bounds():
    """1000 fuzz cases: unit column norms, correlations in [-1, 1], probability maps sum to 1."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_norm = worst_corr = worst_sum = 0.0
    for _ in range(1000):
        c, h, w = (int(v) for v in rng.integers(1, 12, 3))
        scale = float(10 ** rng.uniform(-3, 3))
        a = torch.as_tensor(rng.normal(0, scale, (c, h, w)), dtype=torch.float32)
        b = torch.as_tensor(rng.normal(0, scale, (c, h, w)), dtype=torch.float32)
        size = (4 * w, 4 * h)
        na, nb = l2_normalize(FeatureMap(a, size)), l2_normalize(FeatureMap(b, size))
        worst_norm = max(worst_norm, float((na.data.norm(dim=0) - 1).abs().max()))
        kps = [Keypoint(float(rng.uniform(0, size[0] - 1)), float(rng.uniform(0, size[1] - 1))) for _ in range(3)]
        corr = correlation_map(sample_features(na, kps), nb)
        worst_corr = max(worst_corr, float((corr.abs() - 1).clamp(min=0).max()))
        probs = softmax_2d(corr, float(10 ** rng.uniform(-3, 1)))
        gt = make_ground_truth(kps[0], (h, w), size, int(rng.choice([1, 3, 5, 7])), float(rng.uniform(0.3, 3)))
        worst_sum = max(worst_sum, float((probs.sum(dim=(-2, -1)) - 1).abs().max()), abs(float(gt.sum()) - 1))
    dt = _elapsed(t0)
    ok = worst_norm <= 1e-6 and worst_corr <= 1e-6 and worst_sum <= 1e-6 and dt < 10
    return ok, f"max |norm-1| {worst_norm:.1e}, corr overshoot {worst_corr:.1e}, max |sum-1| {worst_sum:.1e}, {dt:.1f}s"


def _hand_ce(preds, gts):
    total = 0.0
    for p, g in zip(preds, gts):
        s = 0.0
        for pr, gr in zip(p, g):
            for pv, gv in zip(pr, gr):
                s -= gv * math.log(max(pv, 1e-12))
        total += s
    return total / len(preds)


def check_loss_oracle():
    """20 fixed instances against a pure-python cross-entropy; uniform case equals log(cells)."""
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(1, 6, 2))
        preds, gts = [], []
        for _ in range(m):
            p = rng.uniform(0, 1, (h, w))
            p[rng.uniform(size=(h, w)) < 0.1] = 0.0
            p = p / p.sum() if p.sum() > 0 else np.full((h, w), 1 / (h * w))
            g = rng.uniform(0, 1, (h, w))
            g /= g.sum()
            preds.append(p.tolist())
            gts.append(g.tolist())
        got = float(matching_loss([torch.tensor(p, dtype=torch.float64) for p in preds], [torch.tensor(g, dtype=torch.float64) for g in gts]))
        worst = max(worst, abs(got - _hand_ce(preds, gts)))
    exact = True
    for h, w in ((2, 2), (4, 4), (8, 8), (32, 32), (16, 64)):
        gt = torch.zeros(h, w, dtype=torch.float64)
        gt[h // 2, w // 3] = 1
        pred = torch.full((h, w), 1 / (h * w), dtype=torch.float64)
        exact &= float(matching_loss([pred], [gt])) == math.log(h * w)
    return worst <= 1e-9 and exact, f"max |loss - hand| {worst:.1e}; uniform == log(cells) exactly: {exact}"


def check_gradients():
    """Finite-difference gradient check in float64 for every provider kind and parameter group."""
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        split = write_synthetic_split(tmp, n_pairs=4, seed=1)
        backbone = ToyBackbone()
        worst, groups = 0.0, {}
        for provider in ("single", "class", "cpm"):
            cfg = TrainConfig(image_size=64, provider=provider, batch_pairs=2)
            cache = ImageCache(split.root, cfg.image_size)
            pairs = [cache.prepare(p) for p in split.pairs[:2]]
            prov = make_provider(cfg, backbone, split.categories)
            res = grad_check(prov, backbone, pairs, cfg)
            worst = max(worst, res.max_rel_err)
            sampled = {n.split(".")[0].split("[")[0] for n, *_ in res.entries}
            groups[provider] = sampled == set(parameter_groups(prov))
    dt = _elapsed(t0)
    ok = worst < 1e-4 and all(groups.values()) and dt < 60
    return ok, f"max rel err {worst:.1e}; all groups sampled {groups}; {dt:.1f}s"


def check_overfit():
    """Single provider, 8 synthetic pairs, 500 steps: loss ratio < 0.2 and PCK@0.1 gain >= 0.2."""
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        split = write_synthetic_split(tmp, n_pairs=8, seed=0)
        backbone = ToyBackbone()
        cfg = TrainConfig(**OVERFIT_CONFIG)
        prov = make_provider(cfg, backbone, split.categories)
        pck0 = validate_pck(split, prov, backbone, cfg)
        res = train(split, cfg, backbone, provider=prov)
        pck1 = validate_pck(split, res.provider, backbone, cfg)
    losses = [h.loss for h in res.history]
    first, last = smoothed(losses)
    ratio = last / first
    dt = _elapsed(t0)
    ok = all(map(math.isfinite, losses)) and ratio < 0.2 and pck1 - pck0 >= 0.2 and dt < 300
    return ok, f"smoothed loss {first:.3f} -> {last:.3f} (ratio {ratio:.3f}); PCK@0.1 {pck0:.3f} -> {pck1:.3f}; {dt:.0f}s"


def check_cpm_structure():
    """Six-step hand oracle, [75, D] shape, ablation shapes, pooling brute force."""
    t0 = time.perf_counter()
    cfg = CpmConfig(n_dino=4, d_dino=2, d=3, n_global=1, n_cond=2)
    params = CpmParameters(cfg, seed=5).double()
    fa = np.random.default_rng(0).normal(size=(4, 2))
    fb = np.random.default_rng(1).normal(size=(4, 2))
    p = {k: v.detach().numpy().tolist() for k, v in params.named_parameters()}
    want = _hand_cpm(fa.tolist(), fb.tolist(), p["g_d.weight"], p["g_d.bias"], p["g_n.weight"], p["g_n.bias"],
                     p["omega_alpha"], p["omega_pos"], p["theta_global"], 2)
    got = cpm_forward(torch.as_tensor(fa), torch.as_tensor(fb), params).detach().numpy()
    hand_err = float(np.abs(got - want).max())

    big = CpmParameters(CpmConfig(n_dino=256, d_dino=768, d=1024, n_global=25, n_cond=50))
    shape = tuple(cpm_forward(torch.randn(256, 768), torch.randn(256, 768), big).shape)

    variants = [({}, 75), ({"use_global_prompt": False}, 50), ({"use_gn": False}, 75),
                ({"features": "global"}, 75), ({"conditioning": "individual"}, 75)]
    shapes_ok = all(
        tuple(cpm_forward(torch.randn(64, 32), torch.randn(64, 32), CpmParameters(CpmConfig(**flags))).shape) == (n, 16)
        for flags, n in variants
    )
    rng = np.random.default_rng(3)
    pool_ok = True
    for n in range(1, 25):
        for n_out in range(1, n + 1):
            x = torch.as_tensor(rng.normal(size=(n, 2)))
            got_pool = adaptive_max_pool(x, n_out)
            for b in range(n_out):
                lo, hi = b * n // n_out, (b + 1) * n // n_out
                pool_ok &= all(float(got_pool[b, c]) == max(float(x[i, c]) for i in range(lo, hi)) for c in range(2))
    dt = _elapsed(t0)
    ok = hand_err < 1e-12 and shape == (75, 1024) and shapes_ok and pool_ok and dt < 10
    return ok, f"hand oracle err {hand_err:.1e}; shape {shape}; ablations ok {shapes_ok}; pool ok {pool_ok}; {dt:.1f}s"


def check_pck_oracle():
    """Brute-force recount on 50 random pairs for 3 threshold kinds x 2 aggregations; monotone in alpha."""
    pairs, preds = _random_fixture(99)
    alphas = [0.05, 0.1, 0.15]
    exact = True
    for kind in ("img", "kps", "bbox"):
        for agg in ("pair_mean", "point_mean"):
            rep = evaluate_split(pairs, _lookup(preds), alphas, kind, agg)
            rows, cats, overall = _brute(pairs, preds, alphas, kind, agg)
            exact &= [(r.pair_id, r.category, r.n, r.correct) for r in rep.per_pair] == rows
            exact &= rep.per_category == cats and rep.overall == overall
    rng = np.random.default_rng(1000)
    monotone = 0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        gt = rng.uniform(0, 100, (n, 2))
        pr = gt + rng.normal(0, rng.uniform(0.1, 50), (n, 2))
        a = np.sort(rng.uniform(0, 1, 5))
        vals = [pck_pair(pr.tolist(), gt.tolist(), 100.0, float(x)) for x in a]
        monotone += all(x <= y for x, y in zip(vals, vals[1:]))
    return exact and monotone == 1000, f"brute-force recount exact: {exact}; monotone in {monotone}/1000 cases"


def check_corruption():
    """Identity at alpha_bar = 1, variance preservation, frozen alpha_bars[260]."""
    ident = build_schedule(1, 0.0, 0.0, "linear")
    img = torch.randn(3, 16, 16, dtype=torch.float64)
    identity = torch.equal(corrupt(img, 0, torch.randn_like(img), ident), img)
    g = torch.Generator().manual_seed(0)
    sched = build_schedule()
    var_err = 0.0
    for t in (0, 50, 261, 500, 999):
        x = torch.randn(200_000, generator=g, dtype=torch.float64)
        e = torch.randn(200_000, generator=g, dtype=torch.float64)
        var_err = max(var_err, abs(float(corrupt(x, t, e, sched).var()) - 1))
    v1, v2 = build_schedule().alpha_bars[260], build_schedule().alpha_bars[260]
    stable = v1 == v2 and abs(v1 - ALPHA_BAR_260) < 1e-12
    return identity and var_err <= 0.05 and stable, f"identity exact {identity}; max |var-1| {var_err:.3f}; alpha_bars[260] = {v1:.16f}"


def check_determinism_persistence():
    """Bitwise-equal histories, resume equivalence within 1e-9, lossless canonical round trip."""
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        split = write_synthetic_split(tmp / "d", n_pairs=4, seed=2)
        backbone = ToyBackbone()
        cfg = dict(steps=8, batch_pairs=3, image_size=64, checkpoint_every=0)
        a = train(split, TrainConfig(**cfg), backbone)
        b = train(split, TrainConfig(**cfg), backbone)
        bitwise = [h.loss for h in a.history] == [h.loss for h in b.history]
        train(split, TrainConfig(**{**cfg, "steps": 4}), backbone, out_dir=tmp / "r")
        resumed = train(split, TrainConfig(**cfg), backbone, resume=load_checkpoint(tmp / "r" / "last.pt"))
        resume_err = max(abs(x.loss - y.loss) for x, y in zip(a.history, resumed.history))
        params_equal = all(torch.equal(v, resumed.checkpoint.provider_state[k]) for k, v in a.checkpoint.provider_state.items())
        write_canonical(split, tmp / "d" / "copy.jsonl")
        lossless = read_canonical(tmp / "d" / "copy.jsonl").pairs == split.pairs
    ok = bitwise and resume_err <= 1e-9 and lossless
    return ok, f"bitwise histories {bitwise}; resume max diff {resume_err:.1e} (params equal {params_equal}); canonical lossless {lossless}"


def check_self_matching():
    """A == B with an injective positional feature map: every query localized within one stride."""
    from PIL import Image

    bb = PositionalBackbone(stride=2)
    cfg = TrainConfig(image_size=64, t_infer=0)
    prov = make_provider(cfg, bb)
    rng = np.random.default_rng(9)
    worst = 0.0
    with tempfile.TemporaryDirectory() as tmp:
        Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)).save(Path(tmp) / "a.png")
        for _ in range(5):
            kps = tuple(Keypoint(*map(float, rng.uniform(0, 64, 2))) for _ in range(100))
            pair = MatchPair("self", "a.png", "a.png", kps, kps, "c", ((64.0, 64.0), (64.0, 64.0)), None)
            pred = match_pair(pair, prov, bb, cfg, build_schedule(1, 0.0, 0.0, "linear"), tmp)
            worst = max(worst, max(math.hypot(p.x - k.x, p.y - k.y) for p, k in zip(pred, kps)))
    return worst <= bb.stride, f"worst error {worst:.2f}px over 500 queries (stride {bb.stride}px)"


CRITERIA = [
    (1, "normalization and bounds", check_normalization_bounds),
    (2, "loss oracle", check_loss_oracle),
    (3, "gradient check", check_gradients),
    (4, "synthetic overfit", check_overfit),
    (5, "conditional prompt structure", check_cpm_structure),
    (6, "PCK oracle", check_pck_oracle),
    (7, "forward corruption", check_corruption),
    (8, "determinism and persistence", check_determinism_persistence),
    (9, "self-matching", check_self_matching),
]


def _run(number, name, fn):
    ok, detail = fn()
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok, line


@pytest.mark.parametrize("number,name,fn", CRITERIA, ids=[f"criterion_{n}" for n, *_ in CRITERIA])
def test_criterion(number, name, fn):
    torch.set_num_threads(1)
    ok, line = _run(number, name, fn)
    assert ok, line


def main() -> int:
    torch.set_num_threads(1)
    results = [_run(*c)[0] for c in CRITERIA]
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
