"""Prompt tuning: frozen backbone, Adam on prompt-provider parameters only."""
from __future__ import annotations

import copy
import json
import logging
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from . import prompting
from .backbone import NoiseSchedule, build_schedule, extract_batch
from .datasets import DatasetSplit, MatchPair, load_image
from .errors import ParameterError, ParseError, TrainingError
from .matching import FeatureMap, Keypoint, localize_queries, pair_loss
from .prompting import PROJECTION_GROUP, PairContext, trainable_parameters

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 30000
    batch_pairs: int = 9
    lr_prompt: float = 1e-2
    lr_projection: float = 1e-3
    t_train: int = 261
    t_infer: int = 50
    beta: float = 0.04
    kernel_size: int = 7
    sigma: float = 1.0
    image_size: int = 768
    seed: int = 0
    provider: str = "single"
    checkpoint_every: int = 1000
    prompt_length: int = 75
    init: str = "random"
    init_text: str = ""
    window: int = 7
    n_noise: int = 1
    symmetric_loss: bool = False
    class_fallback: bool = False
    # CPM
    n_global: int = 25
    n_cond: int = 50
    use_global_prompt: bool = True
    use_gn: bool = True
    cpm_features: str = "local"
    cpm_conditioning: str = "pair"
    patch_size: int = 8
    d_dino: int = 32
    # validation hook; 0 disables
    val_every: int = 0

    def validate(self, T: int | None = None) -> "TrainConfig":
        positive = ("batch_pairs", "lr_prompt", "beta", "kernel_size", "image_size", "prompt_length", "window", "n_noise")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("steps", "lr_projection", "t_train", "t_infer", "checkpoint_every", "val_every"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.kernel_size % 2 == 0 or self.window % 2 == 0:
            raise ParameterError("kernel_size and window must be odd")
        if T is not None and max(self.t_train, self.t_infer) >= T:
            raise ParameterError(f"timesteps must be < T={T}")
        if self.provider not in ("single", "class", "cpm"):
            raise ParameterError(f"provider must be single, class or cpm, got {self.provider!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def make_provider(cfg: TrainConfig, backbone, categories=(), extractor: nn.Module | None = None) -> nn.Module:
    d = backbone.config.prompt_dim
    if cfg.provider == "single":
        token_source = getattr(backbone, "token_embeddings", None)
        init = prompting.init_prompt(cfg.prompt_length, d, cfg.init, cfg.seed, cfg.init_text, token_source)
        provider = prompting.SinglePrompt(init=init)
    elif cfg.provider == "class":
        fallback = prompting.init_prompt(cfg.prompt_length, d, seed=cfg.seed) if cfg.class_fallback else None
        provider = prompting.ClassPromptBank(sorted(categories), cfg.prompt_length, d, cfg.seed, fallback)
    else:
        if extractor is None:
            extractor = prompting.ToyPatchExtractor(cfg.patch_size, cfg.d_dino, seed=cfg.seed)
        n_dino = _n_patches(extractor, cfg.image_size)
        cpm_cfg = prompting.CpmConfig(
            n_dino=n_dino,
            d_dino=extractor.d_dino,
            d=d,
            n_global=cfg.n_global,
            n_cond=cfg.n_cond,
            use_global_prompt=cfg.use_global_prompt,
            use_gn=cfg.use_gn,
            features=cfg.cpm_features,
            conditioning=cfg.cpm_conditioning,
        )
        provider = prompting.ConditionalPrompt(cpm_cfg, extractor, seed=cfg.seed)
    n = _prompt_length(provider)
    if n > backbone.config.max_prompt_length:
        raise ParameterError(f"prompt length {n} exceeds backbone maximum {backbone.config.max_prompt_length}")
    return provider


def _n_patches(extractor, image_size: int) -> int:
    if hasattr(extractor, "n_patches"):
        return extractor.n_patches(image_size)
    return extractor(torch.zeros(3, image_size, image_size)).shape[0]


def _prompt_length(provider) -> int:
    if isinstance(provider, prompting.ConditionalPrompt):
        return provider.cfg.prompt_length
    return trainable_parameters(provider)[0].tensor.shape[0]


class PreparedPair(NamedTuple):
    pair: MatchPair
    image_a: torch.Tensor
    image_b: torch.Tensor
    kps_a: list[Keypoint]
    kps_b: list[Keypoint]


class ImageCache:
    """Decoded, resized images keyed by resolved path."""

    def __init__(self, root: str | Path, size: int):
        self.root = Path(root)
        self.size = size
        self._images: dict[Path, torch.Tensor] = {}

    def get(self, path: str) -> torch.Tensor:
        p = Path(path)
        p = p if p.is_absolute() else self.root / p
        if p not in self._images:
            self._images[p] = load_image(p, self.size)
        return self._images[p]

    def prepare(self, pair: MatchPair) -> PreparedPair:
        s = self.size

        def scale(kps, size):
            sx, sy = s / size[0], s / size[1]
            return [Keypoint(x * sx, y * sy) for x, y in kps]

        return PreparedPair(
            pair,
            self.get(pair.image_a_path),
            self.get(pair.image_b_path),
            scale(pair.keypoints_a, pair.size_a),
            scale(pair.keypoints_b, pair.size_b),
        )


def batch_indices(n: int, batch: int, seed: int, step: int) -> list[int]:
    """Pair indices for ``step``: a seeded permutation per epoch, wrapping across epochs.

    A pure function of its arguments, so resuming needs no sampler state.
    """
    out = []
    for pos in range(step * batch, (step + 1) * batch):
        epoch, i = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perm[i]))
    return out


def noise_seed(seed: int, step: int, j: int, side: int) -> int:
    return int(np.random.SeedSequence([seed, step, j, side]).generate_state(1)[0])


def batch_loss(provider, backbone, sched: NoiseSchedule, batch: list[PreparedPair], cfg: TrainConfig, step: int, t: int | None = None):
    """Mean per-pair matching loss for one batch; also returns the per-pair losses."""
    t = cfg.t_train if t is None else t
    images, prompts, seeds = [], [], []
    for j, pp in enumerate(batch):
        pa, pb = provider.pair_prompts(PairContext(pp.pair.category, pp.image_a, pp.image_b))
        images += [pp.image_a, pp.image_b]
        prompts += [pa, pb]
        seeds += [noise_seed(cfg.seed, step, j, 0), noise_seed(cfg.seed, step, j, 1)]
    feats = extract_batch(torch.stack(images), t, torch.stack(prompts), seeds, backbone, sched, cfg.n_noise)
    losses = []
    for j, pp in enumerate(batch):
        wh = (pp.image_a.shape[-1], pp.image_a.shape[-2])
        fa = FeatureMap(feats[2 * j], wh)
        fb = FeatureMap(feats[2 * j + 1], (pp.image_b.shape[-1], pp.image_b.shape[-2]))
        losses.append(pair_loss(fa, fb, pp.kps_a, pp.kps_b, cfg.beta, cfg.kernel_size, cfg.sigma, cfg.symmetric_loss))
    losses = torch.stack(losses)
    return losses.mean(), losses


def make_optimizer(provider, cfg: TrainConfig) -> torch.optim.Adam:
    groups = {prompting.PROMPT_GROUP: [], PROJECTION_GROUP: []}
    for spec in trainable_parameters(provider):
        groups[spec.group].append(spec.tensor)
    lrs = {prompting.PROMPT_GROUP: cfg.lr_prompt, PROJECTION_GROUP: cfg.lr_projection}
    param_groups = [{"params": ps, "lr": lrs[g], "name": g} for g, ps in groups.items() if ps]
    return torch.optim.Adam(param_groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


@dataclass
class Checkpoint:
    config: dict
    provider_spec: dict
    provider_state: dict
    optimizer_state: dict | None
    step: int
    history: list = field(default_factory=list)
    format_version: int = CHECKPOINT_VERSION

    def build_provider(self, extractor: nn.Module | None = None) -> nn.Module:
        provider = prompting.build_provider(self.provider_spec, seed=self.config.get("seed", 0), extractor=extractor)
        provider.load_state_dict(self.provider_state)
        return provider

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def make_checkpoint(provider, optimizer, cfg: TrainConfig, step: int, history) -> Checkpoint:
    return Checkpoint(
        config=asdict(cfg),
        provider_spec=provider.spec(),
        provider_state={k: v.detach().clone() for k, v in provider.state_dict().items()},
        optimizer_state=copy.deepcopy(optimizer.state_dict()) if optimizer is not None else None,
        step=step,
        history=[tuple(h) for h in history],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(asdict(ckpt), tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # noqa: BLE001 - torch raises many types for corrupt files
        raise ParseError(f"{path}: not a readable checkpoint (expected format version {CHECKPOINT_VERSION}): {exc}") from exc
    if not isinstance(raw, dict) or "format_version" not in raw:
        raise ParseError(f"{path}: missing format_version (expected {CHECKPOINT_VERSION})")
    if raw["format_version"] != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: checkpoint format version {raw['format_version']} != supported {CHECKPOINT_VERSION}")
    return Checkpoint(**raw)


class HistoryEntry(NamedTuple):
    step: int
    loss: float
    wall_time: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[HistoryEntry]
    provider: nn.Module
    best_val: float | None = None


def train(
    split: DatasetSplit,
    cfg: TrainConfig,
    backbone,
    sched: NoiseSchedule | None = None,
    provider: nn.Module | None = None,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    val_split: DatasetSplit | None = None,
    cache: ImageCache | None = None,
) -> TrainResult:
    """Tune the provider's parameters for ``cfg.steps`` total steps.

    With ``out_dir`` set, ``loss.jsonl`` gets one line per step and
    ``last.pt`` (plus ``best.pt`` when validating) is written every
    ``checkpoint_every`` steps and at the end.
    """
    sched = sched or build_schedule()
    cfg.validate(sched.T)
    cache = cache or ImageCache(split.root, cfg.image_size)
    prepared = [cache.prepare(p) for p in split.pairs]
    if resume is not None:
        provider = resume.build_provider(getattr(provider, "extractor", None))
        start = resume.step
        history = [HistoryEntry(*h) for h in resume.history]
    else:
        if provider is None:
            provider = make_provider(cfg, backbone, split.categories)
        start = 0
        history = []
    if isinstance(provider, prompting.ClassPromptBank) and provider.fallback is None:
        missing = set(split.categories) - set(provider.categories)
        if missing:
            raise ParameterError(f"class prompt bank lacks training categories {sorted(missing)}")
    optimizer = make_optimizer(provider, cfg)
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss.jsonl", "a" if resume is not None else "w")
    best_val = None
    t0 = time.perf_counter()
    try:
        for step in range(start, cfg.steps):
            idx = batch_indices(len(prepared), cfg.batch_pairs, cfg.seed, step)
            batch = [prepared[i] for i in idx]
            optimizer.zero_grad(set_to_none=True)
            loss, per_pair = batch_loss(provider, backbone, sched, batch, cfg, step)
            if not torch.isfinite(loss):
                bad = [batch[j].pair.pair_id for j in range(len(batch)) if not torch.isfinite(per_pair[j])]
                raise TrainingError(f"non-finite loss at step {step}; offending pair(s): {bad}")
            loss.backward()
            optimizer.step()
            entry = HistoryEntry(step, float(loss.detach()), time.perf_counter() - t0)
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry._asdict()) + "\n")
            done = step + 1
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(make_checkpoint(provider, optimizer, cfg, done, history), out / "last.pt")
            if val_split is not None and cfg.val_every and done % cfg.val_every == 0:
                score = validate_pck(val_split, provider, backbone, cfg, sched)
                log.info("step %d: validation PCK@0.1 = %.4f", done, score)
                if best_val is None or score > best_val:
                    best_val = score
                    if out is not None:
                        save_checkpoint(make_checkpoint(provider, optimizer, cfg, done, history), out / "best.pt")
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = make_checkpoint(provider, optimizer, cfg, max(cfg.steps, start), history)
    if out is not None:
        save_checkpoint(ckpt, out / "last.pt")
    return TrainResult(ckpt, history, provider, best_val)


def _pair_seed(seed: int, pair_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(pair_id.encode())]).generate_state(1)[0])


class Matcher:
    """Callable ``MatchPair -> predicted keypoints on image B`` (in the pair's own pixel frame)."""

    def __init__(self, provider, backbone, cfg: TrainConfig, sched: NoiseSchedule | None = None, root: str | Path = ".", cache: ImageCache | None = None):
        self.provider = provider
        self.backbone = backbone
        self.cfg = cfg
        self.sched = sched or build_schedule()
        self.cache = cache or ImageCache(root, cfg.image_size)

    def features(self, pp: PreparedPair) -> tuple[FeatureMap, FeatureMap]:
        with torch.no_grad():
            pa, pb = self.provider.pair_prompts(PairContext(pp.pair.category, pp.image_a, pp.image_b))
            base = _pair_seed(self.cfg.seed, pp.pair.pair_id)
            feats = extract_batch(
                torch.stack([pp.image_a, pp.image_b]), self.cfg.t_infer, torch.stack([pa, pb]),
                [base, base + 1], self.backbone, self.sched, self.cfg.n_noise,
            )
        wa = (pp.image_a.shape[-1], pp.image_a.shape[-2])
        wb = (pp.image_b.shape[-1], pp.image_b.shape[-2])
        return FeatureMap(feats[0], wa), FeatureMap(feats[1], wb)

    def predict_prepared(self, pp: PreparedPair) -> list[Keypoint]:
        fa, fb = self.features(pp)
        return localize_queries(fa, fb, pp.kps_a, self.cfg.beta, self.cfg.window)

    def __call__(self, pair: MatchPair) -> list[Keypoint]:
        pp = self.cache.prepare(pair)
        pred = self.predict_prepared(pp)
        w, h = pair.size_b
        sx, sy = w / pp.image_b.shape[-1], h / pp.image_b.shape[-2]
        return [Keypoint(x * sx, y * sy) for x, y in pred]


def match_pair(pair: MatchPair, provider, backbone, cfg: TrainConfig, sched: NoiseSchedule | None = None, root: str | Path = ".") -> list[Keypoint]:
    return Matcher(provider, backbone, cfg, sched, root)(pair)


def validate_pck(split: DatasetSplit, provider, backbone, cfg: TrainConfig, sched=None, alpha: float = 0.1) -> float:
    from .evaluation import evaluate_split

    report = evaluate_split(split, Matcher(provider, backbone, cfg, sched, split.root), [alpha], "img", "pair_mean")
    return report.overall[alpha]


@dataclass
class GradCheckResult:
    max_rel_err: float
    grad_norm: float
    entries: list[tuple[str, tuple, float, float, float]]  # (param, index, analytic, numeric, rel)


def grad_check(
    provider,
    backbone,
    pairs: list[PreparedPair],
    cfg: TrainConfig,
    sched: NoiseSchedule | None = None,
    n_entries: int = 32,
    eps: float = 1e-5,
    seed: int = 0,
    step: int = 0,
    rel_floor: float = 1e-8,
) -> GradCheckResult:
    """Compare autograd against central differences on a random subset of parameter entries.

    Runs on float64 copies of provider and backbone; the originals are untouched.
    Every trainable tensor contributes at least one sampled entry.
    """
    sched = sched or build_schedule()
    prov = copy.deepcopy(provider).double()
    bb = copy.deepcopy(backbone).to(torch.float64)
    pairs = [pp._replace(image_a=pp.image_a.double(), image_b=pp.image_b.double()) for pp in pairs]
    specs = [s for s in trainable_parameters(prov) if s.tensor.requires_grad]

    def loss_fn():
        return batch_loss(prov, bb, sched, pairs, cfg, step)[0]

    for s in specs:
        s.tensor.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [s.tensor.grad.detach().clone() if s.tensor.grad is not None else torch.zeros_like(s.tensor) for s in specs]
    grad_norm = float(torch.sqrt(sum((g * g).sum() for g in grads)))

    rng = np.random.default_rng(seed)
    picks = [(k, int(rng.integers(specs[k].tensor.numel()))) for k in range(len(specs))]
    sizes = np.array([s.tensor.numel() for s in specs], dtype=np.float64)
    while len(picks) < max(n_entries, len(specs)):
        k = int(rng.choice(len(specs), p=sizes / sizes.sum()))
        picks.append((k, int(rng.integers(specs[k].tensor.numel()))))

    entries = []
    worst = 0.0
    with torch.no_grad():
        for k, flat in picks:
            p = specs[k].tensor
            idx = np.unravel_index(flat, tuple(p.shape))
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss_fn().item()
            p[idx] = orig - eps
            down = loss_fn().item()
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[k][idx].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), rel_floor)
            worst = max(worst, rel)
            entries.append((specs[k].name, tuple(int(i) for i in idx), analytic, numeric, rel))
    return GradCheckResult(worst, grad_norm, entries)
