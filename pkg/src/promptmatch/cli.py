"""Command-line entry point: tune, eval, match, visualize and grad-check.

Every flag can also come from an environment variable named
``PROMPTMATCH_<FLAG>`` (upper case, dashes as underscores), e.g.
``PROMPTMATCH_DATASET_ROOT``. Precedence: command line, then environment,
then ``--config`` YAML, then built-in defaults.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import yaml
from PIL import Image, ImageDraw

from . import backbone as bbmod
from . import training
from .datasets import DatasetSplit, MatchPair, load_split
from .errors import PromptMatchError, UnsupportedFeatureError
from .evaluation import base_threshold, evaluate_split, format_table, write_report
from .matching import Keypoint

log = logging.getLogger("promptmatch")

ENV_PREFIX = "PROMPTMATCH_"
TOY_IMAGE_SIZE = 64
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset-root", help="dataset directory (or canonical .jsonl file)")
    p.add_argument("--dataset", choices=["spair", "pf-pascal", "pf-willow", "canonical"], default="canonical")
    p.add_argument("--split", default="test")
    p.add_argument("--provider", choices=["single", "class", "cpm"], default="single")
    p.add_argument("--backbone", choices=["toy", "real"], default="toy")
    p.add_argument("--weights", help="pretrained weight location for --backbone real")
    p.add_argument("--checkpoint", help="checkpoint written by tune")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--workers", type=int, default=1, help="parallel pair evaluation threads")
    p.add_argument("--config", help="YAML file of training-config values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one training-config value")
    p.add_argument("--verbose", "-v", action="store_true")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alphas", default="0.05,0.1,0.15", help="comma-separated PCK ratios")
    p.add_argument("--threshold", choices=["img", "kps", "bbox"], default="img")
    p.add_argument("--aggregation", choices=["pair", "point"], default="pair")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promptmatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tune", help="tune prompt parameters on a split")
    _add_common(p)
    p.add_argument("--val-split", help="optional validation split name for periodic PCK")

    p = sub.add_parser("eval", help="PCK of a checkpoint, an untrained provider or a predictions file")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--predictions", help="predictions JSONL from match; skips feature extraction")

    p = sub.add_parser("match", help="write predicted keypoints for every pair")
    _add_common(p)

    p = sub.add_parser("visualize", help="draw predictions against ground truth, one PNG per pair")
    _add_common(p)
    p.add_argument("--predictions", help="predictions JSONL from match")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--threshold", choices=["img", "kps", "bbox"], default="img")

    p = sub.add_parser("grad-check", help="finite-difference check of the loss gradient")
    _add_common(p)
    p.add_argument("--pairs", type=int, default=2)
    p.add_argument("--entries", type=int, default=32)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _apply_env(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install PROMPTMATCH_* values as defaults on the chosen subcommand."""
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    cmd = next((a for a in argv if a in sub_action.choices), None)
    if cmd is None:
        return
    sp = sub_action.choices[cmd]
    defaults = {}
    for action in sp._actions:
        if not action.option_strings or action.dest == "help":
            continue
        key = ENV_PREFIX + action.dest.upper()
        if key in os.environ:
            raw = os.environ[key]
            defaults[action.dest] = action.type(raw) if action.type else raw
    sp.set_defaults(**defaults)


def _parse_value(text: str):
    return yaml.safe_load(text)


def train_config(args) -> training.TrainConfig:
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"--config: no such file {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"--config: {path} must hold a mapping")
        values.update(loaded)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = _parse_value(v)
    values["provider"] = args.provider
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("image_size", "image_size")):
        if getattr(args, flag) is not None:
            values[key] = getattr(args, flag)
    if args.backbone == "toy" and "image_size" not in values:
        values["image_size"] = TOY_IMAGE_SIZE
    names = {f.name for f in fields(training.TrainConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown training-config keys: {unknown}")
    return training.TrainConfig(**values)


def _require(args, *flags: str) -> None:
    for flag in flags:
        if not getattr(args, flag.lstrip("-").replace("-", "_")):
            raise UsageError(f"{flag} is required for {args.command}")


def _check_paths(args) -> None:
    _require(args, "--dataset-root")
    if not Path(args.dataset_root).exists():
        raise UsageError(f"--dataset-root: {args.dataset_root} does not exist")
    if args.backbone == "real" and not args.weights:
        raise UsageError("--backbone real needs --weights (local path or model id)")
    if args.checkpoint and not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: {args.checkpoint} does not exist")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")


def _backbone(args, cfg: training.TrainConfig):
    return bbmod.build_backbone(args.backbone, args.weights, image_size=cfg.image_size)


def _provider_and_config(args, cfg, backbone, split: DatasetSplit):
    """Provider from --checkpoint if given, else a freshly initialized one."""
    if args.checkpoint:
        ckpt = training.load_checkpoint(args.checkpoint)
        ck_cfg = ckpt.train_config
        # inference-time values from the command line win over the checkpoint snapshot
        overrides = {k: getattr(cfg, k) for k in ("t_infer", "window", "beta", "n_noise")}
        ck_cfg = training.TrainConfig(**{**asdict(ck_cfg), **overrides})
        return ckpt.build_provider(), ck_cfg
    if cfg.provider == "cpm":
        raise UsageError("the cpm provider has no useful untrained state; run `promptmatch tune --provider cpm` first and pass --checkpoint")
    return training.make_provider(cfg, backbone, split.categories), cfg


def _out_dir(args) -> Path:
    _require(args, "--out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_tune(args) -> int:
    _check_paths(args)
    out = _out_dir(args)
    cfg = train_config(args)
    split = load_split(args.dataset, args.dataset_root, args.split)
    val = load_split(args.dataset, args.dataset_root, args.val_split) if args.val_split else None
    backbone = _backbone(args, cfg)
    resume = training.load_checkpoint(args.checkpoint) if args.checkpoint else None
    (out / "config.yaml").write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))
    res = training.train(split, cfg, backbone, resume=resume, out_dir=out, val_split=val)
    last = res.history[-1].loss if res.history else float("nan")
    print(f"tuned {cfg.provider} provider for {len(res.history)} steps; final loss {last:.6f}; checkpoint {out / 'last.pt'}")
    return EXIT_OK


def read_predictions(path: str | Path) -> dict[str, list[Keypoint]]:
    """Group a match predictions file (one row per query keypoint) by pair id."""
    rows: dict[str, dict[int, Keypoint]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.setdefault(rec["pair_id"], {})[int(rec["index"])] = Keypoint(float(rec["pred_x"]), float(rec["pred_y"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"--predictions {path}:{lineno}: malformed row ({exc})") from exc
    return {pid: [r[i] for i in sorted(r)] for pid, r in rows.items()}


def _lookup_matcher(preds: dict[str, list[Keypoint]]):
    def matcher(pair: MatchPair):
        if pair.pair_id not in preds:
            raise KeyError(f"no predictions for pair {pair.pair_id}")
        return preds[pair.pair_id]

    return matcher


def _alphas(text: str) -> list[float]:
    try:
        vals = [float(a) for a in text.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(f"--alphas: {exc}") from exc
    if not vals or any(a <= 0 for a in vals):
        raise UsageError("--alphas needs positive values")
    return vals


def cmd_eval(args) -> int:
    _check_paths(args)
    alphas = _alphas(args.alphas)
    if args.predictions and not Path(args.predictions).is_file():
        raise UsageError(f"--predictions: {args.predictions} does not exist")
    cfg = train_config(args)
    split = load_split(args.dataset, args.dataset_root, args.split)
    if args.predictions:
        matcher = _lookup_matcher(read_predictions(args.predictions))
    else:
        backbone = _backbone(args, cfg)
        provider, cfg = _provider_and_config(args, cfg, backbone, split)
        matcher = training.Matcher(provider, backbone, cfg, root=split.root)
    aggregation = {"pair": "pair_mean", "point": "point_mean"}[args.aggregation]
    report = evaluate_split(split, matcher, alphas, args.threshold, aggregation, workers=args.workers)
    table = format_table(report)
    print(table)
    if args.out:
        out = _out_dir(args)
        write_report(report, out / "report.jsonl")
        (out / "table.txt").write_text(table + "\n")
    return EXIT_RUNTIME if report.errors else EXIT_OK


def cmd_match(args) -> int:
    _check_paths(args)
    out = _out_dir(args)
    cfg = train_config(args)
    split = load_split(args.dataset, args.dataset_root, args.split)
    backbone = _backbone(args, cfg)
    provider, cfg = _provider_and_config(args, cfg, backbone, split)
    matcher = training.Matcher(provider, backbone, cfg, root=split.root)
    n = 0
    with open(out / "predictions.jsonl", "w") as fh:
        for pair in split.pairs:
            for i, (q, p) in enumerate(zip(pair.keypoints_a, matcher(pair))):
                fh.write(json.dumps({
                    "pair_id": pair.pair_id, "index": i,
                    "query_x": q.x, "query_y": q.y, "pred_x": p.x, "pred_y": p.y,
                }) + "\n")
                n += 1
    print(f"wrote {n} predictions for {len(split)} pairs to {out / 'predictions.jsonl'}")
    return EXIT_OK


def _load_rgb(path: Path) -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB")


def render_pair(pair: MatchPair, pred: list[Keypoint], root: str | Path, alpha: float, kind: str = "img") -> Image.Image:
    """Image A and B side by side; lines from query to prediction, green if within alpha*theta."""
    a = _load_rgb(Path(root) / pair.image_a_path)
    b = _load_rgb(Path(root) / pair.image_b_path)
    canvas = Image.new("RGB", (a.width + b.width, max(a.height, b.height)), "white")
    canvas.paste(a, (0, 0))
    canvas.paste(b, (a.width, 0))
    draw = ImageDraw.Draw(canvas)
    tol = alpha * base_threshold(kind, pair)
    r = max(2, round(0.01 * max(canvas.size)))
    for q, p, g in zip(pair.keypoints_a, pred, pair.keypoints_b):
        ok = (p.x - g.x) ** 2 + (p.y - g.y) ** 2 <= tol * tol
        colour = (0, 200, 0) if ok else (220, 0, 0)
        px, gx = p.x + a.width, g.x + a.width
        draw.line([(q.x, q.y), (px, p.y)], fill=colour, width=1)
        draw.ellipse([q.x - r, q.y - r, q.x + r, q.y + r], outline=(255, 255, 0))
        draw.ellipse([gx - r, g.y - r, gx + r, g.y + r], outline=(0, 0, 255))
        draw.ellipse([px - r, p.y - r, px + r, p.y + r], fill=colour)
    return canvas


def cmd_visualize(args) -> int:
    _check_paths(args)
    _require(args, "--predictions")
    if not Path(args.predictions).is_file():
        raise UsageError(f"--predictions: {args.predictions} does not exist")
    out = _out_dir(args)
    split = load_split(args.dataset, args.dataset_root, args.split)
    preds = read_predictions(args.predictions)
    n = 0
    for pair in split.pairs:
        if pair.pair_id not in preds:
            log.warning("no predictions for %s; skipped", pair.pair_id)
            continue
        img = render_pair(pair, preds[pair.pair_id], split.root, args.alpha, args.threshold)
        img.save(out / f"{pair.pair_id.replace('/', '_').replace(':', '_')}.png")
        n += 1
    print(f"wrote {n} image(s) to {out}")
    return EXIT_OK if n else EXIT_RUNTIME


def cmd_grad_check(args) -> int:
    _check_paths(args)
    cfg = train_config(args)
    split = load_split(args.dataset, args.dataset_root, args.split)
    backbone = _backbone(args, cfg)
    if args.checkpoint:
        provider, cfg = _provider_and_config(args, cfg, backbone, split)
    else:
        provider = training.make_provider(cfg, backbone, split.categories)
    cache = training.ImageCache(split.root, cfg.image_size)
    pairs = [cache.prepare(p) for p in split.pairs[: args.pairs]]
    res = training.grad_check(provider, backbone, pairs, cfg, n_entries=args.entries, seed=cfg.seed)
    for name, idx, an, num, rel in res.entries:
        log.info("%s%s analytic %.6e numeric %.6e rel %.2e", name, list(idx), an, num, rel)
    ok = res.max_rel_err < args.tol
    print(f"max relative error {res.max_rel_err:.3e} over {len(res.entries)} entries (tol {args.tol:g}): {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "tune": cmd_tune,
    "eval": cmd_eval,
    "match": cmd_match,
    "visualize": cmd_visualize,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_env(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"promptmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as exc:
        print(f"promptmatch: error: bad environment value: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"promptmatch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedFeatureError as exc:
        print(f"promptmatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (PromptMatchError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"promptmatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
