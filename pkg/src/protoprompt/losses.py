"""Training objective: classification, part-shaping terms and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ConfigError, InputError

EPS = 1e-8
PART_SHAPING_TERMS = ("orthogonality", "equivariance", "presence_fg", "presence_bg", "entropy", "total_variation")


# --- classification --------------------------------------------------------


def concept_scores(final_prompts: torch.Tensor, heads: nn.ModuleList) -> torch.Tensor:
    """``s_k = Head_k(p_k)`` for every concept: ``[B, n, C]``."""
    if final_prompts.shape[1] != len(heads):
        raise ConfigError(f"{final_prompts.shape[1]} prompts but {len(heads)} heads")
    return torch.stack([head(final_prompts[:, k]) for k, head in enumerate(heads)], dim=1)


def classification_loss(final_prompts: torch.Tensor, heads: nn.ModuleList, labels: torch.Tensor):
    """Cross-entropy of the concept-averaged scores.

    Returns ``(loss, per_concept_scores [B, n, C], averaged_scores [B, C])``.
    """
    scores = concept_scores(final_prompts, heads)
    averaged = scores.mean(dim=1)
    num_classes = averaged.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")
    return F.cross_entropy(averaged, labels), scores, averaged


# --- part shaping ----------------------------------------------------------


def orthogonality_loss(vectors: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Sum of cosine similarities over all ordered pairs ``k != l``."""
    unit = vectors / vectors.norm(dim=-1, keepdim=True).clamp_min(eps)
    cos = unit @ unit.T
    return cos.sum() - cos.diagonal().sum()


def affine_matrix(rotation_deg: float = 0.0, translation=(0.0, 0.0), scale: float = 1.0) -> torch.Tensor:
    """``2 x 3`` matrix in ``affine_grid`` normalised coordinates.

    ``translation`` is a fraction of the image side; normalised coordinates
    span 2 units, hence the factor 2.
    """
    a = math.radians(rotation_deg)
    c, s = math.cos(a) * scale, math.sin(a) * scale
    tx, ty = translation
    return torch.tensor([[c, -s, 2 * tx], [s, c, 2 * ty]], dtype=torch.float64)


def invert_affine(theta: torch.Tensor) -> torch.Tensor:
    full = torch.cat([theta, theta.new_tensor([[0.0, 0.0, 1.0]])], dim=0)
    return torch.linalg.inv(full)[:2]


@dataclass
class TransformRanges:
    rotation_deg: float = 15.0
    translation: float = 0.10
    scale: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        self.scale = tuple(self.scale)


def sample_affine(generator: torch.Generator, ranges: TransformRanges = TransformRanges(), min_det: float = 1e-3) -> torch.Tensor:
    """One random rotation/translation/scale, resampled while near-singular."""
    while True:
        u = torch.rand(4, generator=generator, dtype=torch.float64)
        rot = (2 * u[0].item() - 1) * ranges.rotation_deg
        tx = (2 * u[1].item() - 1) * ranges.translation
        ty = (2 * u[2].item() - 1) * ranges.translation
        lo, hi = ranges.scale
        sc = lo + (hi - lo) * u[3].item()
        theta = affine_matrix(rot, (tx, ty), sc)
        if abs(torch.det(theta[:, :2]).item()) > min_det:
            return theta


def warp(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Resample ``[B, C, H, W]`` so that output(p) = input(theta @ p); zeros outside."""
    theta = theta.to(x.dtype)
    if theta.dim() == 2:
        theta = theta.unsqueeze(0).expand(x.shape[0], -1, -1)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def equivariance_from_maps(
    maps: torch.Tensor, maps_transformed: torch.Tensor, theta: torch.Tensor, eps: float = EPS
) -> torch.Tensor:
    """Equivariance loss given ``A(x)`` and ``A(T(x))`` as ``[B, m, h, w]``.

    Only the ``K = m - 1`` foreground channels enter the average, so the
    identity transform scores exactly zero.
    """
    K = maps.shape[1] - 1
    back = warp(maps_transformed, invert_affine(theta.to(torch.float64)))
    a, b, bt = maps[:, :K].flatten(2), back[:, :K].flatten(2), maps_transformed[:, :K].flatten(2)
    corr = (a * b).sum(-1).abs() / (a.norm(dim=-1) * bt.norm(dim=-1)).clamp_min(eps)
    return 1 - corr.mean()


def equivariance_loss(model_fn, images: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """``model_fn`` maps images to ``[B, m, h, w]`` attention maps."""
    return equivariance_from_maps(model_fn(images), model_fn(warp(images, theta)), theta)


def radial_mask(H: int, W: int, dtype=torch.float64) -> torch.Tensor:
    """Zero at the centre, one at the corners, growing quadratically outwards."""
    i = torch.arange(H, dtype=dtype) / max(H - 1, 1) - 0.5
    j = torch.arange(W, dtype=dtype) / max(W - 1, 1) - 0.5
    return 2 * i[:, None] ** 2 + 2 * j[None, :] ** 2


def pool_attention(attention: torch.Tensor) -> torch.Tensor:
    """3x3 mean filter, stride 1, border windows averaged over valid cells only."""
    return F.avg_pool2d(attention, 3, stride=1, padding=1, count_include_pad=False)


def presence_losses(
    attention: torch.Tensor,
    pooled: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    eps: float = EPS,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Foreground and background presence terms for a ``[B, m, h, w]`` batch.

    Returns ``(fg, bg, n_floored)`` where ``n_floored`` counts images whose
    background maximum had to be floored at ``eps`` before the log.
    """
    if pooled is None:
        pooled = pool_attention(attention)
    if mask is None:
        mask = radial_mask(*pooled.shape[-2:])
    mask = mask.to(pooled.dtype)
    fg_max = pooled[:, :-1].amax(dim=(0, 2, 3))
    fg = 1 - fg_max.mean()
    bg_max = (mask * pooled[:, -1]).amax(dim=(-2, -1))
    floored = int((bg_max.detach() < eps).sum())
    bg = -torch.log(bg_max.clamp_min(eps)).mean()
    return fg, bg, floored


def entropy_loss(attention: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """``-1/(K+1) sum_k sum_ij a log a`` per image, averaged over any leading axes.

    The floor applies inside the log only, so exact zeros (and negative
    biased values) contribute nothing and one-hot maps score exactly zero.
    """
    a = attention.clamp_min(0)
    per_image = -(a * a.clamp_min(eps).log()).sum(dim=(-3, -2, -1)) / attention.shape[-3]
    return per_image.mean()


def total_variation_loss(attention: torch.Tensor) -> torch.Tensor:
    """Sum of absolute horizontal and vertical differences divided by ``H * W``."""
    H, W = attention.shape[-2:]
    dv = (attention[..., 1:, :] - attention[..., :-1, :]).abs().sum(dim=(-3, -2, -1))
    dh = (attention[..., :, 1:] - attention[..., :, :-1]).abs().sum(dim=(-3, -2, -1))
    return ((dv + dh) / (H * W)).mean()


# --- weighting and report --------------------------------------------------


@dataclass
class LossWeights:
    cls: float = 1.0
    ps: float = 1.0
    con: float = 1.0
    orthogonality: float = 1.0
    equivariance: float = 1.0
    presence_fg: float = 1.0
    presence_bg: float = 1.0
    entropy: float = 1.0
    total_variation: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative, got {getattr(self, f.name)}")


@dataclass
class LossReport:
    cls: torch.Tensor
    orthogonality: torch.Tensor
    equivariance: torch.Tensor
    presence_fg: torch.Tensor
    presence_bg: torch.Tensor
    entropy: torch.Tensor
    total_variation: torch.Tensor
    consistency: torch.Tensor
    total: torch.Tensor
    per_layer: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {f.name: float(getattr(self, f.name).detach()) for f in fields(self) if f.name != "per_layer"}
        rec["per_layer"] = {
            k: [v if isinstance(v, dict) else float(v) for v in vals] for k, vals in self.per_layer.items()
        }
        return rec


def part_shaping_sum(terms: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    return sum(getattr(weights, name) * terms[name] for name in PART_SHAPING_TERMS)


def total_loss(
    cls: torch.Tensor,
    part_shaping: list[dict[str, torch.Tensor]],
    consistency: list[torch.Tensor],
    weights: LossWeights,
) -> LossReport:
    """Weighted objective; part-shaping and consistency are averaged over layers first."""
    for f in fields(weights):
        if getattr(weights, f.name) < 0:
            raise ConfigError(f"loss weight {f.name} must be non-negative")
    zero = cls.new_zeros(())
    averaged = {
        name: torch.stack([t[name] for t in part_shaping]).mean() if part_shaping else zero
        for name in PART_SHAPING_TERMS
    }
    ps = part_shaping_sum(averaged, weights)
    con = torch.stack(consistency).mean() if consistency else zero
    total = weights.cls * cls + weights.ps * ps + weights.con * con
    per_layer = {
        "part_shaping": [
            {name: float(t[name].detach()) for name in PART_SHAPING_TERMS}
            | {"sum": float(part_shaping_sum(t, weights).detach())}
            for t in part_shaping
        ],
        "consistency": [float(c.detach()) for c in consistency],
    }
    return LossReport(cls=cls, consistency=con, total=total, per_layer=per_layer, **averaged)
