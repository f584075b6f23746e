"""Correlation-based matching primitives.

Everything here is a pure function of torch tensors so that the matching loss
stays differentiable with respect to whatever produced the feature maps.

Pixel <-> feature-grid coordinates use the half-pixel-centred convention

    u = (x + 0.5) * W_feat / W_img - 0.5

in both directions, shared by sampling, ground-truth placement and
localization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, OutOfBoundsError, ParameterError, ShapeError

NORM_EPS = 1e-12
LOG_CLAMP = 1e-12


class Keypoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class FeatureMap:
    """Feature tensor ``[C, H, W]`` plus the pixel size ``(width, height)`` it covers."""

    data: torch.Tensor
    image_size: tuple[int, int]
    normalized: bool = False

    def __post_init__(self):
        if self.data.dim() != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"feature map must be [C, H, W] with C, H, W >= 1, got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def stride(self) -> tuple[float, float]:
        """Pixels per grid cell along x and y."""
        w, h = self.image_size
        return w / self.data.shape[2], h / self.data.shape[1]


def pixel_to_grid(x, size_px: float, size_feat: int):
    return (x + 0.5) * size_feat / size_px - 0.5


def grid_to_pixel(u, size_px: float, size_feat: int):
    return (u + 0.5) * size_px / size_feat - 0.5


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{what} contains non-finite values")


def _as_points(kps) -> torch.Tensor:
    if isinstance(kps, torch.Tensor):
        pts = kps
    else:
        pts = torch.as_tensor([[float(k[0]), float(k[1])] for k in kps], dtype=torch.float64)
    if pts.dim() != 2 or pts.shape[-1] != 2:
        raise ShapeError(f"keypoints must be [n, 2], got {tuple(pts.shape)}")
    return pts


def _check_inside(pts: torch.Tensor, image_size: tuple[int, int]) -> None:
    w, h = image_size
    x, y = pts[:, 0], pts[:, 1]
    bad = (x < 0) | (x >= w) | (y < 0) | (y >= h)
    if bad.any():
        i = int(torch.nonzero(bad)[0])
        raise OutOfBoundsError(
            f"keypoint {i} at ({float(x[i]):.3f}, {float(y[i]):.3f}) outside image of size {w}x{h}"
        )


def l2_normalize(fm: FeatureMap) -> FeatureMap:
    """Scale every spatial column to unit norm; zero columns stay zero."""
    _check_finite(fm.data, "feature map")
    data = _normalize_channels(fm.data, dim=0)
    return replace(fm, data=data, normalized=True)


def _normalize_channels(x: torch.Tensor, dim: int) -> torch.Tensor:
    sq = (x * x).sum(dim=dim, keepdim=True)
    ok = sq >= NORM_EPS**2
    # sqrt of a masked value keeps gradients finite for zero columns
    norm = torch.sqrt(torch.where(ok, sq, torch.ones_like(sq)))
    return torch.where(ok, x / norm, torch.zeros_like(x))


def sample_features(fm: FeatureMap, kps) -> torch.Tensor:
    """Bilinearly sample ``[n, C]`` unit-norm descriptors at pixel keypoints."""
    pts = _as_points(kps)
    _check_inside(pts, fm.image_size)
    data = fm.data
    c, h, w = data.shape
    img_w, img_h = fm.image_size
    pts = pts.to(data.dtype)
    u = pixel_to_grid(pts[:, 0], img_w, w).clamp(0, w - 1)
    v = pixel_to_grid(pts[:, 1], img_h, h).clamp(0, h - 1)
    u0 = u.floor().long().clamp(max=w - 1)
    v0 = v.floor().long().clamp(max=h - 1)
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    du = (u - u0.to(u.dtype)).unsqueeze(0)
    dv = (v - v0.to(v.dtype)).unsqueeze(0)
    f00 = data[:, v0, u0]
    f01 = data[:, v0, u1]
    f10 = data[:, v1, u0]
    f11 = data[:, v1, u1]
    out = (1 - dv) * ((1 - du) * f00 + du * f01) + dv * ((1 - du) * f10 + du * f11)
    return _normalize_channels(out.t(), dim=1)


def sample_feature(fm: FeatureMap, kp: Keypoint) -> torch.Tensor:
    return sample_features(fm, [kp])[0]


def correlation_map(query: torch.Tensor, fm_b: FeatureMap) -> torch.Tensor:
    """Dot product of one or more ``[.., C]`` queries with every cell of ``fm_b``.

    Returns ``[H, W]`` for a single query and ``[n, H, W]`` for a batch.
    """
    if query.shape[-1] != fm_b.channels:
        raise ShapeError(f"query has {query.shape[-1]} channels, feature map has {fm_b.channels}")
    return torch.einsum("...c,chw->...hw", query.to(fm_b.data.dtype), fm_b.data)


def softmax_2d(m: torch.Tensor, beta: float) -> torch.Tensor:
    """Temperature softmax over the last two (spatial) dimensions."""
    if not beta > 0:
        raise ParameterError(f"temperature must be > 0, got {beta}")
    _check_finite(m, "correlation map")
    shape = m.shape
    flat = m.reshape(*shape[:-2], -1) / beta
    return torch.softmax(flat, dim=-1).reshape(shape)


def log_softmax_2d(m: torch.Tensor, beta: float) -> torch.Tensor:
    if not beta > 0:
        raise ParameterError(f"temperature must be > 0, got {beta}")
    shape = m.shape
    return torch.log_softmax(m.reshape(*shape[:-2], -1) / beta, dim=-1).reshape(shape)


def gaussian_kernel(kernel_size: int, sigma: float) -> torch.Tensor:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if kernel_size > 1 and not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    r = kernel_size // 2
    if r == 0:
        return torch.ones(1, 1, dtype=torch.float64)
    ax = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return g


def nearest_cell(kp, grid: tuple[int, int], image_size: tuple[int, int]) -> tuple[int, int]:
    h, w = grid
    img_w, img_h = image_size
    u = pixel_to_grid(float(kp[0]), img_w, w)
    v = pixel_to_grid(float(kp[1]), img_h, h)
    col = min(max(int(math.floor(u + 0.5)), 0), w - 1)
    row = min(max(int(math.floor(v + 0.5)), 0), h - 1)
    return row, col


def make_ground_truth(
    target_kp,
    grid: tuple[int, int],
    image_size: tuple[int, int],
    kernel_size: int = 7,
    sigma: float = 1.0,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """One-hot at the nearest grid cell, blurred by a truncated Gaussian and renormalized."""
    kernel = gaussian_kernel(kernel_size, sigma)
    _check_inside(_as_points([target_kp]), image_size)
    h, w = grid
    row, col = nearest_cell(target_kp, grid, image_size)
    r = kernel_size // 2
    out = torch.zeros(h, w, dtype=torch.float64)
    r0, r1 = max(row - r, 0), min(row + r, h - 1)
    c0, c1 = max(col - r, 0), min(col + r, w - 1)
    out[r0 : r1 + 1, c0 : c1 + 1] = kernel[r0 - row + r : r1 - row + r + 1, c0 - col + r : c1 - col + r + 1]
    return (out / out.sum()).to(dtype)


def make_ground_truths(targets, grid, image_size, kernel_size=7, sigma=1.0, dtype=torch.float64) -> torch.Tensor:
    return torch.stack([make_ground_truth(k, grid, image_size, kernel_size, sigma, dtype) for k in targets])


def _stack(maps) -> torch.Tensor:
    if isinstance(maps, torch.Tensor):
        return maps
    return torch.stack(list(maps))


def matching_loss(pred: Sequence[torch.Tensor] | torch.Tensor, gt: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy ``H(gt_q, pred_q)`` over query points, log clamped at 1e-12."""
    if len(pred) == 0 or len(gt) == 0:
        raise ParameterError("matching_loss needs at least one query")
    if len(pred) != len(gt):
        raise ParameterError(f"got {len(pred)} predictions but {len(gt)} targets")
    p, g = _stack(pred), _stack(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {tuple(p.shape)} != target shape {tuple(g.shape)}")
    g = g.to(p.dtype)
    ce = -(g * torch.log(p.clamp_min(LOG_CLAMP))).flatten(1).sum(dim=1)
    return ce.mean()


def matching_loss_from_logits(corr: torch.Tensor, gt: torch.Tensor, beta: float) -> torch.Tensor:
    """Same cross-entropy as :func:`matching_loss` but evaluated through log-softmax.

    Used for optimization: cells whose probability underflows the log clamp
    still receive gradient.
    """
    if corr.shape != gt.shape:
        raise ShapeError(f"correlation shape {tuple(corr.shape)} != target shape {tuple(gt.shape)}")
    if corr.shape[0] == 0:
        raise ParameterError("matching_loss needs at least one query")
    logp = log_softmax_2d(corr, beta)
    return -(gt.to(logp.dtype) * logp).flatten(1).sum(dim=1).mean()


def pair_loss(
    fa: FeatureMap,
    fb: FeatureMap,
    kps_a,
    kps_b,
    beta: float = 0.04,
    kernel_size: int = 7,
    sigma: float = 1.0,
    symmetric: bool = False,
) -> torch.Tensor:
    """Matching loss for one image pair from raw (unnormalized) feature maps."""
    na, nb = l2_normalize(fa), l2_normalize(fb)
    loss = _directional_loss(na, nb, kps_a, kps_b, beta, kernel_size, sigma)
    if symmetric:
        loss = 0.5 * (loss + _directional_loss(nb, na, kps_b, kps_a, beta, kernel_size, sigma))
    return loss


def _directional_loss(na, nb, kps_src, kps_dst, beta, kernel_size, sigma):
    queries = sample_features(na, kps_src)
    corr = correlation_map(queries, nb)
    gt = make_ground_truths(kps_dst, nb.grid, nb.image_size, kernel_size, sigma, dtype=corr.dtype)
    return matching_loss_from_logits(corr, gt, beta)


def argmax_2d(m: torch.Tensor) -> tuple[int, int]:
    """Row-major first cell attaining the maximum."""
    if m.numel() == 0:
        raise ShapeError("empty map")
    flat = m.detach().reshape(-1)
    top = flat.max()
    idx = int(torch.nonzero(flat == top)[0])
    return divmod(idx, m.shape[-1])


def kernel_softmax_localize(m: torch.Tensor, beta: float, window: int, image_size: tuple[int, int]) -> Keypoint:
    """Windowed soft-argmax around the global argmax, returned in image pixels."""
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 1, got {window}")
    if not beta > 0:
        raise ParameterError(f"temperature must be > 0, got {beta}")
    m = m.detach().to(torch.float64)
    h, w = m.shape
    row, col = argmax_2d(m)
    r = window // 2
    r0, r1 = max(row - r, 0), min(row + r, h - 1)
    c0, c1 = max(col - r, 0), min(col + r, w - 1)
    p = softmax_2d(m[r0 : r1 + 1, c0 : c1 + 1], beta)
    rows = torch.arange(r0, r1 + 1, dtype=torch.float64)
    cols = torch.arange(c0, c1 + 1, dtype=torch.float64)
    v = float((p.sum(dim=1) * rows).sum())
    u = float((p.sum(dim=0) * cols).sum())
    img_w, img_h = image_size
    return Keypoint(grid_to_pixel(u, img_w, w), grid_to_pixel(v, img_h, h))


def localize_queries(
    fa: FeatureMap, fb: FeatureMap, kps_a, beta: float = 0.04, window: int = 7
) -> list[Keypoint]:
    """Predict target locations in B for each query keypoint in A."""
    na, nb = l2_normalize(fa), l2_normalize(fb)
    with torch.no_grad():
        corr = correlation_map(sample_features(na, kps_a), nb)
    return [kernel_softmax_localize(c, beta, window, fb.image_size) for c in corr]
