"""Pair records and loaders for SPair-71k, PF-Pascal, PF-Willow and the
canonical line-delimited interchange format."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import IngestionError, ParameterError, ParseError
from .matching import Keypoint

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "validation", "test")
SOURCES = ("pf_pascal", "pf_willow", "spair71k", "canonical")

PASCAL_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


@dataclass(frozen=True)
class MatchPair:
    pair_id: str
    image_a_path: str
    image_b_path: str
    keypoints_a: tuple[Keypoint, ...]
    keypoints_b: tuple[Keypoint, ...]
    category: str
    original_sizes: tuple[tuple[float, float], tuple[float, float]]
    bbox_b: tuple[float, float, float, float] | None = None

    @property
    def size_a(self) -> tuple[float, float]:
        return self.original_sizes[0]

    @property
    def size_b(self) -> tuple[float, float]:
        return self.original_sizes[1]

    def validate(self) -> "MatchPair":
        if len(self.keypoints_a) != len(self.keypoints_b):
            raise ParseError(f"pair {self.pair_id}: {len(self.keypoints_a)} source vs {len(self.keypoints_b)} target keypoints")
        if not self.keypoints_a:
            raise ParseError(f"pair {self.pair_id}: no keypoints")
        for side, kps, (w, h) in (("A", self.keypoints_a, self.size_a), ("B", self.keypoints_b, self.size_b)):
            for i, (x, y) in enumerate(kps):
                if not (0 <= x < w and 0 <= y < h):
                    raise ParseError(f"pair {self.pair_id}: keypoint {i} ({x}, {y}) outside image {side} of size {w}x{h}")
        if self.bbox_b is not None:
            x, y, bw, bh = self.bbox_b
            w, h = self.size_b
            if bw < 0 or bh < 0 or x < 0 or y < 0 or x + bw > w + 1e-6 or y + bh > h + 1e-6:
                raise ParseError(f"pair {self.pair_id}: bbox {self.bbox_b} outside image B of size {w}x{h}")
        return self


@dataclass(frozen=True)
class DatasetSplit:
    pairs: tuple[MatchPair, ...]
    name: str = "test"
    source: str = "canonical"
    root: str = "."

    def __post_init__(self):
        if not self.pairs:
            raise IngestionError(f"{self.source}/{self.name}: split is empty")
        if self.name not in SPLITS:
            raise ParameterError(f"split name must be one of {SPLITS}, got {self.name!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    @property
    def categories(self) -> list[str]:
        return sorted({p.category for p in self.pairs})


def _kps(xs, ys) -> tuple[Keypoint, ...]:
    return tuple(Keypoint(float(x), float(y)) for x, y in zip(xs, ys))


def _require(path: Path) -> Path:
    if not path.exists():
        raise IngestionError(f"missing file: {path}")
    return path


def image_size(path: Path) -> tuple[int, int]:
    with Image.open(_require(path)) as im:
        return im.size


def load_image(path: str | Path, size: int | tuple[int, int] | None = None) -> torch.Tensor:
    """Decode PNG/JPEG to ``[3, H, W]`` float in [-1, 1], optionally resized (aspect not kept)."""
    with Image.open(_require(Path(path))) as im:
        im = im.convert("RGB")
        if size is not None:
            wh = (size, size) if isinstance(size, int) else tuple(size)
            im = im.resize(wh, Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


def _split_dir_name(split: str, mapping: dict[str, str]) -> str:
    if split not in mapping:
        raise ParameterError(f"split {split!r} not available; options {sorted(mapping)}")
    return mapping[split]


def load_spair(root: str | Path, split: str = "test") -> DatasetSplit:
    """SPair-71k: ``PairAnnotation/{trn,val,test}/*.json`` plus ``JPEGImages/<category>/<image>``.

    Keypoints given as ``null`` or with a negative coordinate in either image
    are treated as invisible and dropped.
    """
    root = Path(root)
    ann_dir = _require(root / "PairAnnotation" / _split_dir_name(split, {"train": "trn", "validation": "val", "test": "test"}))
    pairs = []
    for f in sorted(ann_dir.glob("*.json")):
        try:
            rec = json.loads(f.read_text())
            cat = rec["category"]
            src, trg = rec["src_kps"], rec["trg_kps"]
            keep = [
                i for i, (a, b) in enumerate(zip(src, trg))
                if a is not None and b is not None and min(a) >= 0 and min(b) >= 0
            ]
            a_path = f"JPEGImages/{cat}/{rec['src_imname']}"
            b_path = f"JPEGImages/{cat}/{rec['trg_imname']}"
            sizes = (tuple(rec["src_imsize"][:2]), tuple(rec["trg_imsize"][:2]))
            x1, y1, x2, y2 = rec["trg_bndbox"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"pair {f.stem}: malformed annotation ({exc})") from exc
        _require(root / a_path), _require(root / b_path)
        if not keep:
            log.warning("pair %s has no mutually visible keypoints; skipped", f.stem)
            continue
        w, h = sizes[1]
        bbox = (float(x1), float(y1), float(min(x2, w) - x1), float(min(y2, h) - y1))
        pairs.append(
            MatchPair(
                pair_id=f.stem,
                image_a_path=a_path,
                image_b_path=b_path,
                keypoints_a=tuple(Keypoint(float(src[i][0]), float(src[i][1])) for i in keep),
                keypoints_b=tuple(Keypoint(float(trg[i][0]), float(trg[i][1])) for i in keep),
                category=cat,
                original_sizes=(tuple(map(float, sizes[0])), tuple(map(float, sizes[1]))),
                bbox_b=bbox,
            ).validate()
        )
    return DatasetSplit(tuple(pairs), split, "spair71k", str(root))


def _coords(cell: str) -> list[float]:
    return [float(v) for v in cell.replace(",", ";").split(";") if v.strip()]


def load_pf_pascal(root: str | Path, split: str = "test") -> DatasetSplit:
    """PF-Pascal pair lists ``{trn,val,test}_pairs.csv`` with columns
    ``source_image,target_image,class,XA,YA,XB,YB`` (coordinates ``;``-separated,
    image paths relative to ``root``, class a 1-based PASCAL index or a name).
    Keypoints with a negative coordinate are dropped."""
    root = Path(root)
    csv_path = _require(root / f"{_split_dir_name(split, {'train': 'trn', 'validation': 'val', 'test': 'test'})}_pairs.csv")
    pairs = []
    with open(csv_path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            pid = f"{split}_{i:05d}"
            try:
                xa, ya, xb, yb = (_coords(row[k]) for k in ("XA", "YA", "XB", "YB"))
                cls = row["class"].strip()
                cat = PASCAL_CLASSES[int(cls) - 1] if cls.isdigit() else cls
                a_path, b_path = row["source_image"], row["target_image"]
            except (KeyError, ValueError, IndexError) as exc:
                raise ParseError(f"pair {pid}: malformed row ({exc})") from exc
            pair = _pf_pair(root, pid, a_path, b_path, xa, ya, xb, yb, cat)
            if pair is not None:
                pairs.append(pair)
    return DatasetSplit(tuple(pairs), split, "pf_pascal", str(root))


def load_pf_willow(root: str | Path, split: str = "test") -> DatasetSplit:
    """PF-Willow ``test_pairs.csv`` with columns ``imageA,imageB,XA1..XAn,YA1..YAn,XB1..XBn,YB1..YBn``.

    Category is the image's parent directory name. Only a test split exists.
    """
    if split != "test":
        raise ParameterError("PF-Willow only has a test split")
    root = Path(root)
    csv_path = _require(root / "test_pairs.csv")
    pairs = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = (len(header) - 2) // 4
        for i, row in enumerate(reader):
            pid = f"test_{i:05d}"
            try:
                vals = [float(v) for v in row[2:]]
                if len(vals) != 4 * n:
                    raise ValueError(f"expected {4 * n} coordinates, got {len(vals)}")
                xa, ya, xb, yb = (vals[k * n : (k + 1) * n] for k in range(4))
                a_path, b_path = row[0], row[1]
            except (ValueError, IndexError) as exc:
                raise ParseError(f"pair {pid}: malformed row ({exc})") from exc
            cat = Path(a_path).parent.name
            pair = _pf_pair(root, pid, a_path, b_path, xa, ya, xb, yb, cat, bbox=False)
            if pair is not None:
                pairs.append(pair)
    return DatasetSplit(tuple(pairs), "test", "pf_willow", str(root))


def _pf_pair(root, pid, a_path, b_path, xa, ya, xb, yb, cat, bbox=True):
    if not (len(xa) == len(ya) == len(xb) == len(yb)):
        raise ParseError(f"pair {pid}: coordinate lists differ in length")
    keep = [i for i in range(len(xa)) if min(xa[i], ya[i], xb[i], yb[i]) >= 0]
    if not keep:
        log.warning("pair %s has no mutually visible keypoints; skipped", pid)
        return None
    size_a = tuple(map(float, image_size(root / a_path)))
    size_b = tuple(map(float, image_size(root / b_path)))
    return MatchPair(
        pair_id=pid,
        image_a_path=a_path,
        image_b_path=b_path,
        keypoints_a=tuple(Keypoint(xa[i], ya[i]) for i in keep),
        keypoints_b=tuple(Keypoint(xb[i], yb[i]) for i in keep),
        category=cat,
        original_sizes=(size_a, size_b),
        bbox_b=None,
    ).validate()


def rescale_pair(p: MatchPair, target: tuple[float, float]) -> MatchPair:
    """Rescale keypoints and bbox of both images to ``target = (w, h)``."""
    tw, th = float(target[0]), float(target[1])
    if tw <= 0 or th <= 0:
        raise ParameterError(f"target size must be positive, got {target}")

    def scale(kps, size):
        sx, sy = tw / size[0], th / size[1]
        return tuple(Keypoint(x * sx, y * sy) for x, y in kps)

    bbox = None
    if p.bbox_b is not None:
        sx, sy = tw / p.size_b[0], th / p.size_b[1]
        x, y, w, h = p.bbox_b
        bbox = (x * sx, y * sy, w * sx, h * sy)
    return replace(
        p,
        keypoints_a=scale(p.keypoints_a, p.size_a),
        keypoints_b=scale(p.keypoints_b, p.size_b),
        bbox_b=bbox,
        original_sizes=((tw, th), (tw, th)),
    )


_PAIR_FIELDS = ("pair_id", "image_a_path", "image_b_path", "keypoints_a", "keypoints_b", "category", "original_sizes", "bbox_b")


def _pair_to_record(p: MatchPair) -> dict:
    return {
        "pair_id": p.pair_id,
        "image_a_path": p.image_a_path,
        "image_b_path": p.image_b_path,
        "keypoints_a": [[k.x, k.y] for k in p.keypoints_a],
        "keypoints_b": [[k.x, k.y] for k in p.keypoints_b],
        "category": p.category,
        "original_sizes": [list(p.size_a), list(p.size_b)],
        "bbox_b": list(p.bbox_b) if p.bbox_b is not None else None,
    }


def _record_to_pair(rec: dict, where: str) -> MatchPair:
    unknown = set(rec) - set(_PAIR_FIELDS)
    if unknown:
        log.warning("%s: ignoring unknown fields %s", where, sorted(unknown))
    try:
        return MatchPair(
            pair_id=str(rec["pair_id"]),
            image_a_path=rec["image_a_path"],
            image_b_path=rec["image_b_path"],
            keypoints_a=tuple(Keypoint(float(x), float(y)) for x, y in rec["keypoints_a"]),
            keypoints_b=tuple(Keypoint(float(x), float(y)) for x, y in rec["keypoints_b"]),
            category=rec["category"],
            original_sizes=tuple(tuple(float(v) for v in s) for s in rec["original_sizes"]),
            bbox_b=tuple(float(v) for v in rec["bbox_b"]) if rec.get("bbox_b") is not None else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: malformed pair record ({exc!r})") from exc


def write_canonical(split: DatasetSplit, path: str | Path) -> None:
    """Write a header line then one JSON pair record per line (atomic replace)."""
    path = Path(path)
    header = {"schema_version": SCHEMA_VERSION, "name": split.name, "source": split.source}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for p in split.pairs:
            fh.write(json.dumps(_pair_to_record(p)) + "\n")
    os.replace(tmp, path)


def read_canonical(path: str | Path, root: str | Path | None = None, check_files: bool = True) -> DatasetSplit:
    """Inverse of :func:`write_canonical`. Image paths resolve against ``root``
    (default: the file's directory)."""
    path = Path(_require(Path(path)))
    root = Path(root) if root is not None else path.parent
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: header is not valid JSON ({exc.msg})") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ParseError(f"{path}: schema_version {version!r} not supported (expected {SCHEMA_VERSION})")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid record ({exc.msg})") from exc
        pair = _record_to_pair(rec, f"{path}:{lineno}")
        try:
            pair.validate()
        except ParseError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if check_files:
            _require(root / pair.image_a_path), _require(root / pair.image_b_path)
        pairs.append(pair)
    return DatasetSplit(tuple(pairs), header.get("name", "test"), header.get("source", "canonical"), str(root))


def load_split(kind: str, root: str | Path, split: str = "test") -> DatasetSplit:
    """Dispatch on dataset kind (``spair``, ``pf-pascal``, ``pf-willow``, ``canonical``).

    For ``canonical``, ``root`` is either the ``.jsonl`` file or a directory
    holding ``<split>.jsonl``.
    """
    kind = kind.replace("-", "_")
    if kind in ("spair", "spair71k"):
        return load_spair(root, split)
    if kind == "pf_pascal":
        return load_pf_pascal(root, split)
    if kind == "pf_willow":
        return load_pf_willow(root, split)
    if kind == "canonical":
        root = Path(root)
        return read_canonical(root / f"{split}.jsonl" if root.is_dir() else root)
    raise ParameterError(f"unknown dataset kind {kind!r}")
