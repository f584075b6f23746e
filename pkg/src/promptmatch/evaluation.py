"""PCK evaluation and report I/O."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .datasets import DatasetSplit, MatchPair
from .errors import ParameterError, ParseError, ShapeError
from .matching import Keypoint

log = logging.getLogger(__name__)

THRESHOLD_KINDS = ("img", "kps", "bbox")
AGGREGATIONS = ("pair_mean", "point_mean")
DEFAULT_ALPHAS = (0.05, 0.1, 0.15)


def base_threshold(kind: str, pair: MatchPair) -> float:
    if kind == "img":
        w, h = pair.size_b
        return float(max(w, h))
    if kind == "kps":
        if not pair.keypoints_b:
            raise ParameterError(f"pair {pair.pair_id}: no keypoints for kps threshold")
        xs = [k.x for k in pair.keypoints_b]
        ys = [k.y for k in pair.keypoints_b]
        return float(max(max(xs) - min(xs), max(ys) - min(ys)))
    if kind == "bbox":
        if pair.bbox_b is None:
            raise ParameterError(f"pair {pair.pair_id}: bbox threshold requested but pair has no bounding box")
        return float(max(pair.bbox_b[2], pair.bbox_b[3]))
    raise ParameterError(f"unknown threshold kind {kind!r}")


def count_correct(predicted: Sequence, gt: Sequence, threshold: float, alpha: float) -> int:
    if len(predicted) != len(gt):
        raise ShapeError(f"{len(predicted)} predictions for {len(gt)} ground-truth points")
    tol = alpha * threshold
    return sum(math.hypot(p[0] - g[0], p[1] - g[1]) <= tol for p, g in zip(predicted, gt))


def pck_pair(predicted: Sequence, gt: Sequence, threshold: float, alpha: float) -> float:
    """Fraction of predictions within ``alpha * threshold`` (inclusive) of ground truth."""
    if len(gt) == 0:
        raise ShapeError("pck needs at least one point")
    return count_correct(predicted, gt, threshold, alpha) / len(gt)


@dataclass
class PairResult:
    pair_id: str
    category: str
    n: int
    correct: dict[float, int]
    pck: dict[float, float]


@dataclass
class PckReport:
    alphas: list[float]
    threshold_kind: str
    aggregation: str
    per_pair: list[PairResult] = field(default_factory=list)
    per_category: dict[str, dict[float, float]] = field(default_factory=dict)
    overall: dict[float, float] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def to_records(self) -> list[dict]:
        head = {
            "type": "header",
            "alphas": self.alphas,
            "threshold_kind": self.threshold_kind,
            "aggregation": self.aggregation,
        }
        rows = [head]
        for r in self.per_pair:
            rows.append({
                "type": "pair", "pair_id": r.pair_id, "category": r.category, "n": r.n,
                "correct": [r.correct[a] for a in self.alphas], "pck": [r.pck[a] for a in self.alphas],
            })
        for pid, msg in self.errors.items():
            rows.append({"type": "error", "pair_id": pid, "message": msg})
        for cat, vals in self.per_category.items():
            rows.append({"type": "category", "category": cat, "pck": [vals[a] for a in self.alphas]})
        rows.append({"type": "overall", "pck": [self.overall[a] for a in self.alphas]})
        return rows


def _aggregate(results: list[PairResult], alphas, aggregation) -> dict[float, float]:
    if not results:
        return {a: float("nan") for a in alphas}
    if aggregation == "pair_mean":
        return {a: sum(r.pck[a] for r in results) / len(results) for a in alphas}
    total = sum(r.n for r in results)
    return {a: sum(r.correct[a] for r in results) / total for a in alphas}


def evaluate_split(
    split: DatasetSplit | Sequence[MatchPair],
    matcher: Callable[[MatchPair], Sequence],
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    kind: str = "img",
    aggregation: str = "pair_mean",
    workers: int = 1,
) -> PckReport:
    """Run ``matcher`` on every pair and aggregate PCK per pair, per category and overall.

    A matcher exception is recorded in ``report.errors`` and the pair is left
    out of every mean. With ``workers > 1`` pairs are matched on a thread pool;
    results are merged by pair id so the report does not depend on scheduling.
    """
    if kind not in THRESHOLD_KINDS:
        raise ParameterError(f"threshold kind must be one of {THRESHOLD_KINDS}, got {kind!r}")
    if aggregation not in AGGREGATIONS:
        raise ParameterError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    alphas = [float(a) for a in alphas]
    report = PckReport(alphas, kind, aggregation)
    pairs = split.pairs if isinstance(split, DatasetSplit) else list(split)

    def run(pair: MatchPair):
        theta = base_threshold(kind, pair)
        try:
            pred = list(matcher(pair))
            return {a: count_correct(pred, pair.keypoints_b, theta, a) for a in alphas}, None
        except Exception as exc:  # noqa: BLE001 - any matcher failure is a per-pair error
            log.warning("pair %s failed: %s", pair.pair_id, exc)
            return None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(run, pairs))
    else:
        outcomes = [run(p) for p in pairs]
    for pair, (correct, err) in zip(pairs, outcomes):
        if err is not None:
            report.errors[pair.pair_id] = err
            continue
        n = len(pair.keypoints_b)
        report.per_pair.append(PairResult(pair.pair_id, pair.category, n, correct, {a: correct[a] / n for a in alphas}))
    report.per_pair.sort(key=lambda r: r.pair_id)
    for cat in sorted({r.category for r in report.per_pair}):
        report.per_category[cat] = _aggregate([r for r in report.per_pair if r.category == cat], alphas, aggregation)
    report.overall = _aggregate(report.per_pair, alphas, aggregation)
    return report


def format_table(report: PckReport) -> str:
    """Plain-text table: one row per alpha, one column per category plus ``All``."""
    cats = list(report.per_category)
    cols = cats + ["All"]
    width = max([6] + [len(c) for c in cols])
    lines = [
        f"PCK ({report.threshold_kind} threshold, {report.aggregation})",
        "alpha  " + " ".join(c[:width].rjust(width) for c in cols),
    ]
    for a in report.alphas:
        vals = [report.per_category[c][a] for c in cats] + [report.overall[a]]
        lines.append(f"{a:<6g} " + " ".join(f"{100 * v:{width}.1f}" for v in vals))
    if report.errors:
        lines.append(f"{len(report.errors)} pair(s) failed: {', '.join(sorted(report.errors))}")
    return "\n".join(lines)


def write_report(report: PckReport, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in report.to_records():
            fh.write(json.dumps(rec) + "\n")


def read_report(path: str | Path) -> PckReport:
    report = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["type"]
                if kind == "header":
                    report = PckReport([float(a) for a in rec["alphas"]], rec["threshold_kind"], rec["aggregation"])
                    continue
                if report is None:
                    raise ParseError(f"{path}:{lineno}: record before header")
                al = report.alphas
                if kind == "pair":
                    report.per_pair.append(PairResult(
                        rec["pair_id"], rec["category"], rec["n"],
                        dict(zip(al, rec["correct"])), dict(zip(al, rec["pck"])),
                    ))
                elif kind == "error":
                    report.errors[rec["pair_id"]] = rec["message"]
                elif kind == "category":
                    report.per_category[rec["category"]] = dict(zip(al, rec["pck"]))
                elif kind == "overall":
                    report.overall = dict(zip(al, rec["pck"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed report line ({exc})") from exc
    if report is None:
        raise ParseError(f"{path}: no header")
    return report
