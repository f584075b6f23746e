"""Forward diffusion and prompt-conditioned feature extraction.

A backbone is anything exposing ``config`` (a :class:`BackboneConfig`),
``encode(images)`` and ``features(latents, t, prompts)``. The toy UNet here is
fully deterministic from its seed and is what the test suite runs against; the
:class:`StableDiffusionAdapter` wraps a pretrained latent diffusion model when
``diffusers`` and weights are available.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, ParameterError, ShapeError, UnsupportedFeatureError
from .matching import FeatureMap

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alphas)


def build_schedule(
    T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012, kind: str = "scaled_linear"
) -> NoiseSchedule:
    """Per-step retention ``alpha_t = 1 - beta_t`` and their cumulative products.

    The defaults are the public scaled-linear schedule of Stable Diffusion 2.x.
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0 <= beta_start <= beta_end < 1):
        raise ParameterError(f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    if T > 1 and not (betas[1:] > 0).all():
        raise ParameterError("alpha_bars must strictly decrease; only beta_0 may be zero")
    alphas = 1.0 - betas
    alphas.setflags(write=False)
    alpha_bars = np.cumprod(alphas)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(alphas, alpha_bars)


def corrupt(img: torch.Tensor, t: int, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed form of the forward process: sqrt(abar_t) * img + sqrt(1 - abar_t) * noise."""
    if not 0 <= t < sched.T:
        raise ParameterError(f"timestep {t} outside [0, {sched.T})")
    if noise.shape != img.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != image shape {tuple(img.shape)}")
    abar = float(sched.alpha_bars[t])
    return math.sqrt(abar) * img + math.sqrt(1.0 - abar) * noise


@dataclass(frozen=True)
class BackboneConfig:
    feature_layer: str = "up_blocks.1"
    prompt_dim: int = 16
    max_prompt_length: int = 77
    image_size: int = 64


@dataclass(frozen=True)
class ToyUNetConfig:
    channels: tuple[int, int] = (8, 16)
    in_channels: int = 3
    prompt_dim: int = 16
    max_prompt_length: int = 77
    time_dim: int = 16
    seed: int = 0
    attn_scale: float = 4.0
    # "structured": near-identity convolutions plus seeded perturbation, so the
    # frozen features keep local appearance; "random": default torch init
    init: str = "structured"
    perturb: float = 0.1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class CrossAttention(nn.Module):
    """Single-head attention from spatial positions to prompt tokens, with residual."""

    def __init__(self, channels: int, prompt_dim: int, scale: float = 1.0):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(prompt_dim, channels, bias=False)
        self.v = nn.Linear(prompt_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)
        self.scale = scale

    def forward(self, x: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # [b, hw, c]
        q, k, v = self.q(tokens), self.k(prompt), self.v(prompt)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        y = self.out(attn @ v) * self.scale
        return x + y.transpose(1, 2).reshape(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(1, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _near_identity_(conv: nn.Conv2d, perturb: float, in_offset: int = 0) -> None:
    """Centre-tap identity from input channel ``in_offset + o`` (cycled) to output ``o``, plus noise."""
    w = torch.randn_like(conv.weight) * perturb / math.sqrt(conv.weight[0].numel())
    kh, kw = conv.kernel_size
    n_in = conv.in_channels - in_offset
    for o in range(conv.out_channels):
        w[o, in_offset + o % n_in, kh // 2, kw // 2] += 1.0
    conv.weight.copy_(w)
    if conv.bias is not None:
        conv.bias.zero_()


class ToyUNet(nn.Module):
    """Miniature text-conditioned UNet.

    Layout for an ``S x S`` input with channels ``(c1, c2)``::

        conv_in            c1 @ S
        down_blocks.0      c1 @ S/2   (stride-2 conv)
        down_blocks.1      c2 @ S/4   (stride-2 conv)
        mid_block          c2 @ S/4   res + cross-attention
        up_blocks.0        c2 @ S/4 -> upsample -> S/2   res + cross-attention
        up_blocks.1        c1 @ S/2   skip concat, res + cross-attention  <- feature tap
        conv_out           in_channels @ S

    Weights are drawn from ``seed`` once and frozen.
    """

    feature_layers = ("mid_block", "up_blocks.0", "up_blocks.1")

    def __init__(self, cfg: ToyUNetConfig = ToyUNetConfig()):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.channels
        td = cfg.time_dim
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
            self.conv_in = nn.Conv2d(cfg.in_channels, c1, 3, padding=1)
            self.down0 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
            self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
            self.mid_res = ResBlock(c2, c2, td)
            self.mid_attn = CrossAttention(c2, cfg.prompt_dim, cfg.attn_scale)
            self.up0_res = ResBlock(c2, c2, td)
            self.up0_attn = CrossAttention(c2, cfg.prompt_dim, cfg.attn_scale)
            self.up0_conv = nn.Conv2d(c2, c2, 3, padding=1)
            self.up1_res = ResBlock(c2 + c1, c1, td)
            self.up1_attn = CrossAttention(c1, cfg.prompt_dim, cfg.attn_scale)
            self.conv_out = nn.Conv2d(c1 + c1, cfg.in_channels, 3, padding=1)
            if cfg.init == "structured":
                self._structured_init(cfg.perturb)
            elif cfg.init != "random":
                raise ParameterError(f"unknown toy init {cfg.init!r}")
        finally:
            torch.random.set_rng_state(gen_state)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def _structured_init(self, perturb: float) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m.kernel_size == (3, 3):
                _near_identity_(m, perturb)
        # the decoder skip carries the stride-2 encoder features straight to the tap
        _near_identity_(self.up1_res.skip, perturb, in_offset=self.cfg.channels[1])
        for res in (self.mid_res, self.up0_res, self.up1_res):
            res.conv2.weight.mul_(0.5)
        for attn in (self.mid_attn, self.up0_attn, self.up1_attn):
            attn.out.bias.zero_()

    def forward(self, x: torch.Tensor, t: torch.Tensor, prompt: torch.Tensor, tap: str | None = None):
        """Predict noise; if ``tap`` names a layer, stop there and return its activation."""
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"toy UNet needs spatial size divisible by 4, got {tuple(x.shape[-2:])}")
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x.dtype))
        h0 = self.conv_in(x)
        h1 = F.silu(self.down0(h0))
        h2 = F.silu(self.down1(h1))
        h = self.mid_attn(self.mid_res(h2, temb), prompt)
        if tap == "mid_block":
            return h
        h = self.up0_attn(self.up0_res(h, temb), prompt)
        h = self.up0_conv(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        if tap == "up_blocks.0":
            return h
        h = self.up1_attn(self.up1_res(torch.cat([h, h1], dim=1), temb), prompt)
        if tap == "up_blocks.1":
            return h
        h = F.interpolate(h, scale_factor=2.0, mode="nearest")
        return self.conv_out(torch.cat([h, h0], dim=1))


class ToyBackbone:
    """Backbone interface over :class:`ToyUNet`; the image itself is the latent."""

    def __init__(self, unet_cfg: ToyUNetConfig = ToyUNetConfig(), feature_layer: str = "up_blocks.1", image_size: int = 64):
        if feature_layer not in ToyUNet.feature_layers:
            raise ParameterError(f"unknown feature layer {feature_layer!r}; options {ToyUNet.feature_layers}")
        self.unet = ToyUNet(unet_cfg)
        self.config = BackboneConfig(
            feature_layer=feature_layer,
            prompt_dim=unet_cfg.prompt_dim,
            max_prompt_length=unet_cfg.max_prompt_length,
            image_size=image_size,
        )
        self.dtype = torch.float32

    def to(self, dtype: torch.dtype) -> "ToyBackbone":
        self.unet.to(dtype)
        self.dtype = dtype
        return self

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images.to(self.dtype)

    def features(self, latents: torch.Tensor, t: int, prompts: torch.Tensor) -> torch.Tensor:
        tt = torch.full((latents.shape[0],), t, dtype=torch.long)
        return self.unet(latents, tt, prompts.to(self.dtype), tap=self.config.feature_layer)

    def state_fingerprint(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.unet.state_dict().items()}


class PositionalBackbone:
    """Features that encode only grid position: sin/cos at several frequencies per axis.

    Injective in position by construction (the lowest frequency spans half a
    period over the image), so on an A == B pair every query has a unique best
    match. Used as the reference feature map for self-matching checks.
    """

    def __init__(self, stride: int = 2, freqs=(1, 2, 4, 8, 16), prompt_dim: int = 16, max_prompt_length: int = 77, image_size: int = 64):
        if stride < 1:
            raise ParameterError(f"stride must be >= 1, got {stride}")
        self.stride = stride
        self.freqs = tuple(freqs)
        self.config = BackboneConfig("positional", prompt_dim, max_prompt_length, image_size)
        self.dtype = torch.float32

    def to(self, dtype: torch.dtype) -> "PositionalBackbone":
        self.dtype = dtype
        return self

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images.to(self.dtype)

    def features(self, latents: torch.Tensor, t: int, prompts: torch.Tensor) -> torch.Tensor:
        b, _, h, w = latents.shape
        gh, gw = h // self.stride, w // self.stride
        ys = (torch.arange(gh, dtype=self.dtype) + 0.5) / gh
        xs = (torch.arange(gw, dtype=self.dtype) + 0.5) / gw
        chans = []
        for f in self.freqs:
            for coord, shape in ((xs[None, :], (gh, gw)), (ys[:, None], (gh, gw))):
                ang = math.pi * f * coord
                chans += [torch.cos(ang).expand(shape), torch.sin(ang).expand(shape)]
        return torch.stack(chans)[None].expand(b, -1, -1, -1).contiguous()

    def state_fingerprint(self) -> dict[str, torch.Tensor]:
        return {}


def _check_prompt(prompt: torch.Tensor, backbone) -> None:
    cfg = backbone.config
    if prompt.dim() != 2:
        raise ShapeError(f"prompt must be [N, D], got {tuple(prompt.shape)}")
    n, d = prompt.shape
    if d != cfg.prompt_dim:
        raise ShapeError(f"prompt width {d} != backbone prompt_dim {cfg.prompt_dim}")
    if n < 1 or n > cfg.max_prompt_length:
        raise ShapeError(f"prompt length {n} outside [1, {cfg.max_prompt_length}]")


def _seeded_noise(shape, seed: int, dtype: torch.dtype) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)


def extract_batch(
    images: torch.Tensor,
    t: int,
    prompts: torch.Tensor,
    noise_seeds,
    backbone,
    sched: NoiseSchedule,
    n_noise: int = 1,
) -> torch.Tensor:
    """Batched extraction: ``images [B, C, H, W]``, ``prompts [B, N, D]`` -> features ``[B, C', h, w]``.

    Each sample draws its own noise from its seed so results do not depend on
    how samples are grouped into batches. With ``n_noise > 1`` the features of
    that many independent draws are averaged.
    """
    if prompts.dim() != 3 or prompts.shape[0] != images.shape[0]:
        raise ShapeError(f"prompts must be [B, N, D] matching batch {images.shape[0]}, got {tuple(prompts.shape)}")
    for p in prompts:
        _check_prompt(p, backbone)
    if not 0 <= t < sched.T:
        raise ParameterError(f"timestep {t} outside [0, {sched.T})")
    if not torch.isfinite(images).all():
        raise InvalidInputError("image contains non-finite values")
    latents = backbone.encode(images)
    out = None
    for k in range(n_noise):
        noise = torch.stack(
            [_seeded_noise(latents.shape[1:], int(s) + k * 1_000_003, latents.dtype) for s in noise_seeds]
        )
        feats = backbone.features(corrupt(latents, t, noise, sched), t, prompts)
        out = feats if out is None else out + feats
    return out / n_noise


def extract_features(
    img: torch.Tensor,
    t: int,
    prompt: torch.Tensor,
    noise_seed: int,
    backbone,
    sched: NoiseSchedule,
    n_noise: int = 1,
) -> FeatureMap:
    """Corrupt ``img [C, H, W]`` to step ``t`` and read the tapped decoder activation."""
    _check_prompt(prompt, backbone)
    feats = extract_batch(img[None], t, prompt[None], [noise_seed], backbone, sched, n_noise)
    return FeatureMap(feats[0], (img.shape[-1], img.shape[-2]))


def extract_pair(img_a, img_b, t, prompt, seeds, backbone, sched, n_noise: int = 1) -> tuple[FeatureMap, FeatureMap]:
    """Both images of a pair, conditioned on the same prompt, with independent noise."""
    fa = extract_features(img_a, t, prompt, seeds[0], backbone, sched, n_noise)
    fb = extract_features(img_b, t, prompt, seeds[1], backbone, sched, n_noise)
    return fa, fb


class StableDiffusionAdapter:
    """Pretrained latent diffusion backbone (VAE encode + UNet up-block tap).

    Requires the optional ``diffusers`` and ``transformers`` packages and local
    or downloadable weights identified by ``weights``.
    """

    def __init__(self, weights: str | Path, feature_layer: int = 1, image_size: int = 768, device: str = "cpu"):
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise UnsupportedFeatureError(
                "the real backbone needs `pip install diffusers transformers`; use --backbone toy otherwise"
            ) from exc
        try:
            self.vae = AutoencoderKL.from_pretrained(weights, subfolder="vae").to(device)
            self.unet = UNet2DConditionModel.from_pretrained(weights, subfolder="unet").to(device)
            self.tokenizer = CLIPTokenizer.from_pretrained(weights, subfolder="tokenizer")
            self.text_encoder = CLIPTextModel.from_pretrained(weights, subfolder="text_encoder").to(device)
        except (OSError, ValueError) as exc:
            raise UnsupportedFeatureError(f"could not load diffusion weights from {weights!r}: {exc}") from exc
        for m in (self.vae, self.unet, self.text_encoder):
            m.requires_grad_(False)
            m.eval()
        self.device = device
        self.dtype = torch.float32
        self.feature_index = feature_layer
        self.config = BackboneConfig(
            feature_layer=f"up_blocks.{feature_layer}",
            prompt_dim=self.unet.config.cross_attention_dim,
            max_prompt_length=self.tokenizer.model_max_length,
            image_size=image_size,
        )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            lat = self.vae.encode(images.to(self.device, self.dtype)).latent_dist.mode()
        return lat * self.vae.config.scaling_factor

    def features(self, latents: torch.Tensor, t: int, prompts: torch.Tensor) -> torch.Tensor:
        captured = {}
        block = self.unet.up_blocks[self.feature_index]

        def hook(_module, _inp, out):
            captured["x"] = out
            raise _StopForward

        handle = block.register_forward_hook(hook)
        try:
            self.unet(latents, t, encoder_hidden_states=self._wrap_prompt(prompts))
        except _StopForward:
            pass
        finally:
            handle.remove()
        return captured["x"]

    def _wrap_prompt(self, prompts: torch.Tensor) -> torch.Tensor:
        """Place learned tokens between the text encoder's SOS and EOS/padding states."""
        b, n, _ = prompts.shape
        empty = self.token_embeddings("", self.config.max_prompt_length)
        full = empty.expand(b, -1, -1).clone()
        full[:, 1 : 1 + n] = prompts.to(full.dtype)
        return full.to(self.device)

    def token_embeddings(self, text: str, n: int) -> torch.Tensor:
        ids = self.tokenizer(
            text, padding="max_length", max_length=self.tokenizer.model_max_length, truncation=True, return_tensors="pt"
        ).input_ids.to(self.device)
        with torch.no_grad():
            states = self.text_encoder(ids)[0][0]
        return states[:n] if n == states.shape[0] else states[1 : 1 + n]

    def state_fingerprint(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.unet.state_dict().items()}


class _StopForward(Exception):
    pass


def build_backbone(kind: str = "toy", weights: str | None = None, image_size: int = 64, **toy_kwargs):
    if kind == "toy":
        return ToyBackbone(ToyUNetConfig(**toy_kwargs), image_size=image_size)
    if kind == "real":
        if not weights:
            raise UnsupportedFeatureError("--backbone real needs --weights (path or model id)")
        return StableDiffusionAdapter(weights, image_size=image_size)
    raise ParameterError(f"unknown backbone kind {kind!r}")
