"""Prompt providers: a universal prompt, a per-category bank, and the conditional
prompting module (CPM) that builds one prompt per image pair from local patch
features of both images."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import torch
import torch.nn as nn

from .errors import MissingCategoryError, ParameterError, ShapeError, UnsupportedFeatureError

INIT_STD = 0.02
PROMPT_GROUP = "prompt"
PROJECTION_GROUP = "projection"


def _gaussian(shape, seed: int, std: float = INIT_STD) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=torch.float64).mul_(std).float()


def init_prompt(
    n: int,
    d: int,
    mode: str = "random",
    seed: int = 0,
    text: str | None = None,
    token_source: Callable[[str, int], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Initial ``[n, d]`` prompt embedding.

    ``random`` draws N(0, 0.02^2) entries from a generator seeded with ``seed``.
    ``from_tokens`` copies text-encoder states of ``text``, which needs a
    ``token_source(text, n)`` callable (the real backbone's ``token_embeddings``).
    """
    if n < 1 or d < 1:
        raise ParameterError(f"prompt shape must be positive, got ({n}, {d})")
    if mode == "random":
        return _gaussian((n, d), seed)
    if mode == "from_tokens":
        if token_source is None:
            raise UnsupportedFeatureError("from_tokens init needs a backbone that provides token embeddings")
        emb = token_source(text or "", n).detach().float().cpu()
        if emb.shape != (n, d):
            raise ShapeError(f"token embeddings have shape {tuple(emb.shape)}, expected ({n}, {d})")
        return emb.clone()
    raise ParameterError(f"unknown init mode {mode!r}")


class ParamSpec(NamedTuple):
    name: str
    tensor: nn.Parameter
    group: str


class PairContext(NamedTuple):
    """What a provider may look at when producing the prompt for one pair."""

    category: str
    image_a: torch.Tensor
    image_b: torch.Tensor


class SinglePrompt(nn.Module):
    kind = "single"

    def __init__(self, n: int = 75, d: int = 16, seed: int = 0, init: torch.Tensor | None = None):
        super().__init__()
        self.theta = nn.Parameter(init.clone() if init is not None else init_prompt(n, d, seed=seed))

    def spec(self) -> dict:
        n, d = self.theta.shape
        return {"kind": self.kind, "n": n, "d": d}

    def pair_prompts(self, ctx: PairContext) -> tuple[torch.Tensor, torch.Tensor]:
        return self.theta, self.theta


class ClassPromptBank(nn.Module):
    """One prompt per category name; names are stored verbatim."""

    kind = "class"

    def __init__(
        self,
        categories,
        n: int = 75,
        d: int = 16,
        seed: int = 0,
        fallback: torch.Tensor | None = None,
    ):
        super().__init__()
        self.categories = list(categories)
        if not self.categories:
            raise ParameterError("class prompt bank needs at least one category")
        if len(set(self.categories)) != len(self.categories):
            raise ParameterError("duplicate category names in prompt bank")
        self._index = {c: i for i, c in enumerate(self.categories)}
        # independent per-category draws at offset seeds
        self.prompts = nn.ParameterList(
            [nn.Parameter(init_prompt(n, d, seed=seed + 1 + i)) for i in range(len(self.categories))]
        )
        if fallback is not None:
            self.register_buffer("fallback", fallback.detach().clone())
        else:
            self.fallback = None

    def spec(self) -> dict:
        n, d = self.prompts[0].shape
        return {"kind": self.kind, "n": n, "d": d, "categories": list(self.categories), "fallback": self.fallback is not None}

    def get(self, category: str) -> torch.Tensor:
        i = self._index.get(category)
        if i is not None:
            return self.prompts[i]
        if self.fallback is not None:
            return self.fallback
        raise MissingCategoryError(f"no prompt for category {category!r}; known: {self.categories}")

    def pair_prompts(self, ctx: PairContext) -> tuple[torch.Tensor, torch.Tensor]:
        p = self.get(ctx.category)
        return p, p


def get_class_prompt(bank: ClassPromptBank, category: str) -> torch.Tensor:
    return bank.get(category)


def adaptive_max_pool(x: torch.Tensor, n_out: int) -> torch.Tensor:
    """Max over contiguous near-equal bins of the first axis.

    Bin ``i`` covers ``[floor(i*N/n_out), floor((i+1)*N/n_out))``.
    """
    n = x.shape[0]
    if not 1 <= n_out <= n:
        raise ParameterError(f"cannot pool {n} patches into {n_out} bins")
    edges = [(i * n) // n_out for i in range(n_out + 1)]
    return torch.stack([x[edges[i] : edges[i + 1]].amax(dim=0) for i in range(n_out)])


@dataclass(frozen=True)
class CpmConfig:
    n_dino: int = 64
    d_dino: int = 32
    d: int = 16
    n_global: int = 25
    n_cond: int = 50
    use_global_prompt: bool = True
    use_gn: bool = True
    # "local": per-patch features; "global": one pooled descriptor tiled over the patch axis
    features: str = "local"
    # "pair": condition on both images; "individual": each image conditions its own prompt
    conditioning: str = "pair"

    def __post_init__(self):
        if self.features not in ("local", "global"):
            raise ParameterError(f"features must be 'local' or 'global', got {self.features!r}")
        if self.conditioning not in ("pair", "individual"):
            raise ParameterError(f"conditioning must be 'pair' or 'individual', got {self.conditioning!r}")
        if self.n_cond > self.n_dino:
            raise ParameterError(f"n_cond={self.n_cond} exceeds n_dino={self.n_dino}")

    @property
    def prompt_length(self) -> int:
        return self.n_cond + (self.n_global if self.use_global_prompt else 0)


class CpmParameters(nn.Module):
    """Learnable parts of the conditional prompting module."""

    def __init__(self, cfg: CpmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.g_d = nn.Linear(2 * cfg.d_dino, cfg.d)
        self.g_n = nn.Linear(cfg.n_dino, cfg.n_dino)
        with torch.no_grad():
            self.g_d.weight.copy_(_gaussian(self.g_d.weight.shape, seed + 1))
            self.g_d.bias.zero_()
            self.g_n.weight.copy_(_gaussian(self.g_n.weight.shape, seed + 2))
            self.g_n.bias.zero_()
        if not cfg.use_gn:
            self.g_n.requires_grad_(False)
        self.omega_alpha = nn.Parameter(torch.ones(cfg.n_cond, cfg.d))
        self.omega_pos = nn.Parameter(_gaussian((cfg.n_cond, cfg.d), seed + 3))
        if cfg.use_global_prompt:
            self.theta_global = nn.Parameter(_gaussian((cfg.n_global, cfg.d), seed + 4))
        else:
            self.theta_global = None


def cpm_forward(fa: torch.Tensor, fb: torch.Tensor, params: CpmParameters) -> torch.Tensor:
    """Fuse two ``[N_dino, D_dino]`` patch sets into one ``[N_global + N_cond, D]`` prompt."""
    cfg = params.cfg
    if fa.shape != fb.shape:
        raise ShapeError(f"patch feature shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    if fa.dim() != 2 or fa.shape != (cfg.n_dino, cfg.d_dino):
        raise ShapeError(f"patch features must be [{cfg.n_dino}, {cfg.d_dino}], got {tuple(fa.shape)}")
    if cfg.n_cond > fa.shape[0]:
        raise ParameterError(f"n_cond={cfg.n_cond} exceeds n_dino={fa.shape[0]}")
    dtype = params.g_d.weight.dtype
    fa, fb = fa.to(dtype), fb.to(dtype)
    if cfg.conditioning == "individual":
        fb = fa
    if cfg.features == "global":
        fa = fa.mean(dim=0, keepdim=True).expand_as(fa)
        fb = fb.mean(dim=0, keepdim=True).expand_as(fb)
    fab = torch.cat([fa, fb], dim=1)  # [N_dino, 2 D_dino]
    h = params.g_d(fab)  # [N_dino, D]
    if cfg.use_gn:
        h = params.g_n(h.t()).t()  # mixes along the patch axis
    pooled = adaptive_max_pool(h, cfg.n_cond)
    cond = pooled * params.omega_alpha + params.omega_pos
    if params.theta_global is None:
        return cond
    return torch.cat([params.theta_global, cond], dim=0)


class ToyPatchExtractor(nn.Module):
    """Frozen seeded random projection of non-overlapping image patches.

    Stand-in for a pretrained ViT: ``[3, S, S]`` image -> ``[(S/p)^2, d_dino]``.
    """

    def __init__(self, patch: int = 8, d_dino: int = 32, in_channels: int = 3, seed: int = 0):
        super().__init__()
        self.patch = patch
        self.d_dino = d_dino
        self.register_buffer("proj", _gaussian((in_channels * patch * patch, d_dino), seed + 101, std=1.0 / patch))

    def n_patches(self, image_size: int) -> int:
        return (image_size // self.patch) ** 2

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        c, h, w = img.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        patches = img.reshape(c, h // p, p, w // p, p).permute(1, 3, 0, 2, 4).reshape(-1, c * p * p)
        return torch.tanh(patches.to(self.proj.dtype) @ self.proj)


class PretrainedPatchExtractor(nn.Module):
    """Frozen DINOv2-style ViT patch tokens via ``transformers`` (optional)."""

    def __init__(self, model_id: str = "facebook/dinov2-base", image_size: int = 224):
        super().__init__()
        try:
            from transformers import AutoModel

            self.model = AutoModel.from_pretrained(model_id)
        except Exception as exc:  # noqa: BLE001 - any load failure means the feature is unavailable
            raise UnsupportedFeatureError(f"could not load patch extractor {model_id!r}: {exc}") from exc
        self.model.requires_grad_(False)
        self.model.eval()
        self.image_size = image_size
        self.d_dino = self.model.config.hidden_size

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = torch.nn.functional.interpolate(img[None], size=(self.image_size,) * 2, mode="bilinear", align_corners=False)
        with torch.no_grad():
            tokens = self.model(pixel_values=x).last_hidden_state[0]
        return tokens[1:]  # drop CLS


class ConditionalPrompt(nn.Module):
    kind = "cpm"

    def __init__(self, cfg: CpmConfig, extractor: nn.Module | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.params = CpmParameters(cfg, seed)
        self.extractor = extractor if extractor is not None else ToyPatchExtractor(d_dino=cfg.d_dino, seed=seed)
        self.extractor.requires_grad_(False)

    def spec(self) -> dict:
        from dataclasses import asdict

        ex = self.extractor
        return {
            "kind": self.kind,
            "cpm": asdict(self.cfg),
            "patch": getattr(ex, "patch", None),
        }

    def forward(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        return cpm_forward(fa, fb, self.params)

    def pair_prompts(self, ctx: PairContext) -> tuple[torch.Tensor, torch.Tensor]:
        fa = self.extractor(ctx.image_a)
        fb = self.extractor(ctx.image_b)
        if self.cfg.conditioning == "individual":
            return self(fa, fa), self(fb, fb)
        p = self(fa, fb)
        return p, p


def trainable_parameters(provider: nn.Module) -> list[ParamSpec]:
    """Parameters updated by tuning, each tagged with its learning-rate group."""
    if isinstance(provider, SinglePrompt):
        return [ParamSpec("theta", provider.theta, PROMPT_GROUP)]
    if isinstance(provider, ClassPromptBank):
        return [ParamSpec(f"theta[{c}]", p, PROMPT_GROUP) for c, p in zip(provider.categories, provider.prompts)]
    if isinstance(provider, ConditionalPrompt):
        p = provider.params
        specs = [
            ParamSpec("g_d.weight", p.g_d.weight, PROJECTION_GROUP),
            ParamSpec("g_d.bias", p.g_d.bias, PROJECTION_GROUP),
        ]
        if provider.cfg.use_gn:
            specs += [
                ParamSpec("g_n.weight", p.g_n.weight, PROJECTION_GROUP),
                ParamSpec("g_n.bias", p.g_n.bias, PROJECTION_GROUP),
            ]
        specs += [
            ParamSpec("omega_alpha", p.omega_alpha, PROMPT_GROUP),
            ParamSpec("omega_pos", p.omega_pos, PROMPT_GROUP),
        ]
        if p.theta_global is not None:
            specs.append(ParamSpec("theta_global", p.theta_global, PROMPT_GROUP))
        return specs
    raise ParameterError(f"not a prompt provider: {type(provider).__name__}")


def parameter_groups(provider: nn.Module) -> dict[str, list[ParamSpec]]:
    """Trainable parameters grouped by module part: g_d, g_n, omega_alpha, ..."""
    groups: dict[str, list[ParamSpec]] = {}
    for spec in trainable_parameters(provider):
        groups.setdefault(spec.name.split(".")[0].split("[")[0], []).append(spec)
    return groups


def build_provider(spec: dict, seed: int = 0, extractor: nn.Module | None = None) -> nn.Module:
    """Rebuild a provider from its ``spec()`` dict (used by checkpoints and the CLI)."""
    kind = spec["kind"]
    if kind == "single":
        return SinglePrompt(spec["n"], spec["d"], seed=seed)
    if kind == "class":
        fb = torch.zeros(spec["n"], spec["d"]) if spec.get("fallback") else None
        return ClassPromptBank(spec["categories"], spec["n"], spec["d"], seed=seed, fallback=fb)
    if kind == "cpm":
        cfg = CpmConfig(**spec["cpm"])
        if extractor is None:
            extractor = ToyPatchExtractor(patch=spec.get("patch") or 8, d_dino=cfg.d_dino, seed=seed)
        return ConditionalPrompt(cfg, extractor, seed=seed)
    raise ParameterError(f"unknown provider kind {kind!r}")
