"""Concept region discovery and intra-region feature aggregation.

Prototypes are grounded to patches through a softmax over negative squared
Euclidean distances, shifted by a learnable spatial bias. Each patch is then
claimed by its highest-scoring concept, and every concept's prompt is the
region-weighted mean of the patch features it owns.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .backbone import ConfigError, InputError

AGGREGATION_EPS = 1e-6
PROTOTYPE_INIT_STD = 0.05


class NumericalError(FloatingPointError):
    pass


class ConceptPrototypeSet(nn.Module):
    """Learnable prototypes ``Q`` (m x d) and spatial bias maps ``B`` (m x h x w).

    The last channel, ``m - 1``, is the background concept.
    """

    def __init__(self, num_concepts: int, dim: int, grid: int, layer_index: int = 0):
        super().__init__()
        if num_concepts < 2:
            raise ConfigError(f"need at least one foreground concept plus background, got m={num_concepts}")
        self.layer_index = layer_index
        self.prototypes = nn.Parameter(torch.randn(num_concepts, dim) * PROTOTYPE_INIT_STD)
        self.spatial_bias = nn.Parameter(torch.zeros(num_concepts, grid, grid))

    @property
    def m(self) -> int:
        return self.prototypes.shape[0]

    @property
    def background_index(self) -> int:
        return self.m - 1


@dataclass
class AttentionAndRegions:
    """Per-layer concept maps over the patch grid, all batched ``[B, m, h, w]``."""

    attention: torch.Tensor
    pre_bias_attention: torch.Tensor
    region_maps: torch.Tensor | None = None
    assignment: torch.Tensor | None = None  # [B, h, w] long

    @property
    def num_concepts(self) -> int:
        return self.attention.shape[1]


def _batched(E_grid: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if E_grid.dim() == 3:
        return E_grid.unsqueeze(0), True
    return E_grid, False


def compute_attention(E_grid: torch.Tensor, protos: ConceptPrototypeSet) -> AttentionAndRegions:
    """Softmax over concepts of ``-||e_ij - q_k||^2``, then add the spatial bias.

    ``E_grid`` is ``[B, h, w, d]`` (or unbatched ``[h, w, d]``). The bias is
    added after the softmax, so ``attention`` is not confined to [0, 1];
    ``pre_bias_attention`` always sums to one over concepts.
    """
    E_grid, _ = _batched(E_grid)
    Q = protos.prototypes
    if E_grid.shape[-1] != Q.shape[-1]:
        raise InputError(f"embedding dim {E_grid.shape[-1]} != prototype dim {Q.shape[-1]}")
    if not (torch.isfinite(E_grid).all() and torch.isfinite(Q).all()):
        raise NumericalError(f"non-finite embeddings or prototypes at layer {protos.layer_index}")
    Q = Q.to(E_grid.dtype)
    sq_dist = (
        E_grid.pow(2).sum(-1).unsqueeze(1)
        - 2 * torch.einsum("bhwd,md->bmhw", E_grid, Q)
        + Q.pow(2).sum(-1)[None, :, None, None]
    )
    pre = torch.softmax(-sq_dist, dim=1)
    att = pre + protos.spatial_bias.to(pre.dtype).unsqueeze(0)
    return AttentionAndRegions(attention=att, pre_bias_attention=pre)


def compute_region_maps(att: AttentionAndRegions) -> AttentionAndRegions:
    """Keep each patch's attention value only in its winning concept channel.

    ``torch.argmax`` returns the first maximal index, so ties go to the
    lowest concept index.
    """
    A = att.attention
    assignment = A.argmax(dim=1)
    mask = torch.zeros_like(A).scatter_(1, assignment.unsqueeze(1), 1.0)
    return replace(att, region_maps=A * mask, assignment=assignment)


def aggregate_prompts(att: AttentionAndRegions, E_grid: torch.Tensor, eps: float = AGGREGATION_EPS) -> torch.Tensor:
    """Region-weighted mean of patch features, one prompt per concept: ``[B, m, d]``."""
    if att.region_maps is None:
        raise InputError("region maps not computed; call compute_region_maps first")
    E_grid, squeeze = _batched(E_grid)
    R = att.region_maps
    num = torch.einsum("bmhw,bhwd->bmd", R, E_grid)
    den = R.sum(dim=(-2, -1)).unsqueeze(-1) + eps
    prompts = num / den
    return prompts[0] if squeeze else prompts


def empty_region_count(att: AttentionAndRegions) -> int:
    """Number of (image, concept) pairs whose region owns no patch."""
    m = att.num_concepts
    counts = torch.nn.functional.one_hot(att.assignment.flatten(1), m).sum(1)
    return int((counts == 0).sum())


# --- region map export -----------------------------------------------------

_BASE_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (255, 255, 255),
]
BACKGROUND_RGB = (128, 128, 128)
FOREGROUND_ALPHA = 200
BACKGROUND_ALPHA = 70


def palette(num_concepts: int) -> np.ndarray:
    """RGB colour per concept, ``[m, 3]`` uint8; the last row is the background grey."""
    fg = num_concepts - 1
    if fg > len(_BASE_PALETTE):
        raise ConfigError(f"palette supports at most {len(_BASE_PALETTE)} foreground concepts")
    return np.array(_BASE_PALETTE[:fg] + [BACKGROUND_RGB], dtype=np.uint8)


def render_overlay(assignment: np.ndarray, num_concepts: int, scale: int) -> Image.Image:
    """RGBA overlay: each patch filled with its concept colour, background translucent.

    Upscaling is nearest-neighbour by ``scale`` pixels per patch.
    """
    assignment = np.asarray(assignment)
    pal = palette(num_concepts)
    rgb = pal[assignment]
    alpha = np.where(assignment == num_concepts - 1, BACKGROUND_ALPHA, FOREGROUND_ALPHA).astype(np.uint8)
    rgba = np.concatenate([rgb, alpha[..., None]], axis=-1)
    rgba = rgba.repeat(scale, axis=0).repeat(scale, axis=1)
    return Image.fromarray(rgba, mode="RGBA")


def decode_overlay(img: Image.Image, num_concepts: int, scale: int) -> np.ndarray:
    """Inverse of :func:`render_overlay`; reads the centre pixel of every patch cell."""
    arr = np.asarray(img.convert("RGBA"))[..., :3]
    centres = arr[scale // 2 :: scale, scale // 2 :: scale]
    pal = palette(num_concepts).astype(np.int32)
    dist = np.abs(centres[..., None, :].astype(np.int32) - pal).sum(-1)
    return dist.argmin(-1)


def save_assignments(path: str | Path, assignments: dict[str, np.ndarray]) -> None:
    """Write integer assignment grids to an ``.npz`` archive.

    Keys are ``"{image_id}/layer{l}"``; each value is an ``[h, w]`` int64 array
    of concept indices (background = m - 1).
    """
    np.savez(path, **{k: np.asarray(v, dtype=np.int64) for k, v in assignments.items()})


def load_assignments(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
