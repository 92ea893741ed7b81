"""Cross-layer prompt fusion.

Fine-grained prompts are routed to ``n`` high-level groups (plus a background
group 0) by a linear scorer followed by Gumbel-Softmax. Each group's mean
prompt goes through LayerNorm and a small MLP to become one fused prompt. A
KL term keeps the union of a group's fine regions aligned with the matching
coarse region from the last prompted layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ConfigError, InputError

KL_EPS = 1e-8


@dataclass
class FusionConfig:
    n: int = 4
    per_layer_m: list[int] = field(default_factory=lambda: [17, 14, 11, 8])
    gumbel_temperature: float = 1.0
    hard_assignment: bool = True

    def __post_init__(self):
        self.per_layer_m = list(self.per_layer_m)
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.gumbel_temperature <= 0:
            raise ConfigError(f"gumbel_temperature must be positive, got {self.gumbel_temperature}")
        if any(m < 2 for m in self.per_layer_m):
            raise ConfigError(f"every layer needs m >= 2, got {self.per_layer_m}")
        if any(a <= b for a, b in zip(self.per_layer_m, self.per_layer_m[1:])):
            raise ConfigError(f"per_layer_m must strictly decrease toward deeper layers: {self.per_layer_m}")


@dataclass
class GroupAssignment:
    """Prompt-to-group routing for one layer; group 0 is background.

    ``one_hot`` carries straight-through gradients in hard mode.
    """

    logits: torch.Tensor  # [B, m, n+1]
    one_hot: torch.Tensor  # [B, m, n+1]
    assignment: torch.Tensor  # [B, m] long

    @property
    def num_groups(self) -> int:
        return self.logits.shape[-1] - 1

    def members(self) -> torch.Tensor:
        """Member counts per foreground group, ``[B, n]`` (detached)."""
        return F.one_hot(self.assignment, self.num_groups + 1)[..., 1:].sum(1)


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + 1e-20) + 1e-20)


def gumbel_softmax_assign(
    logits: torch.Tensor,
    temperature: float = 1.0,
    hard: bool = True,
    noise: torch.Tensor | None = None,
) -> GroupAssignment:
    """Gumbel-Softmax over the last axis of ``logits``; ``noise=None`` means no noise."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    y = logits if noise is None else logits + noise.to(logits.dtype)
    soft = torch.softmax(y / temperature, dim=-1)
    index = y.argmax(dim=-1)
    if hard:
        hard_y = F.one_hot(index, logits.shape[-1]).to(soft.dtype)
        one_hot = hard_y - soft.detach() + soft
    else:
        one_hot = soft
    return GroupAssignment(logits=logits, one_hot=one_hot, assignment=index)


class GroupingLayer(nn.Module):
    """Linear scorer ``d -> n + 1`` followed by Gumbel-Softmax."""

    def __init__(self, dim: int, n: int, temperature: float = 1.0, hard: bool = True):
        super().__init__()
        if temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        self.linear = nn.Linear(dim, n + 1)
        self.temperature = temperature
        self.hard = hard

    def forward(self, prompts: torch.Tensor, generator: torch.Generator | None = None) -> GroupAssignment:
        if prompts.shape[-1] != self.linear.in_features:
            raise InputError(f"prompt dim {prompts.shape[-1]} != grouping input {self.linear.in_features}")
        logits = self.linear(prompts)
        noise = sample_gumbel(logits.shape, generator, logits.dtype) if self.training else None
        return gumbel_softmax_assign(logits, self.temperature, self.hard, noise)


def assign_groups(
    prompts: torch.Tensor,
    layer: GroupingLayer,
    temperature: float | None = None,
    hard: bool | None = None,
    rng_seed: int | None = None,
) -> GroupAssignment:
    """Route prompts to groups; ``rng_seed=None`` disables the Gumbel noise."""
    temperature = layer.temperature if temperature is None else temperature
    hard = layer.hard if hard is None else hard
    logits = layer.linear(prompts)
    noise = None
    if rng_seed is not None:
        noise = sample_gumbel(logits.shape, torch.Generator().manual_seed(rng_seed), logits.dtype)
    return gumbel_softmax_assign(logits, temperature, hard, noise)


def group_means(prompts: torch.Tensor, assignment: GroupAssignment) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean prompt per foreground group, ``[B, n, d]``, and a ``[B, n]`` empty-group mask.

    Weighted by ``one_hot`` so straight-through gradients reach the scorer.
    Empty groups yield the zero vector.
    """
    W = assignment.one_hot[..., 1:]  # drop background group
    sums = torch.einsum("bmg,bmd->bgd", W, prompts)
    counts = W.sum(1)
    empty = counts.detach() < 1e-6
    safe = torch.where(empty, torch.ones_like(counts), counts)
    means = torch.where(empty.unsqueeze(-1), torch.zeros_like(sums), sums / safe.unsqueeze(-1))
    return means, empty


class PromptFusion(nn.Module):
    """``MLP(LayerNorm(mean))`` with a two-layer MLP of hidden width ``d``."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, means: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.norm(means))


def fuse_groups(
    prompts: torch.Tensor, assignment: GroupAssignment, fusion: PromptFusion
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fused prompts ``[B, n, d]`` and the empty-group mask."""
    means, empty = group_means(prompts, assignment)
    return fusion(means), empty


def grouped_regions(region_maps: torch.Tensor, assignment: GroupAssignment) -> torch.Tensor:
    """Sum of member region maps per foreground group: ``[B, n, h, w]``."""
    return torch.einsum("bmhw,bmg->bghw", region_maps, assignment.one_hot[..., 1:])


def _spatial_distribution(maps: torch.Tensor, eps: float) -> torch.Tensor:
    # additive floor: unlike clamping it keeps a gradient at empty cells,
    # which is what lets a concept be pulled into a group that misses it
    flat = maps.flatten(-2).clamp_min(0) + eps
    return flat / flat.sum(-1, keepdim=True)


def consistency_loss(
    fine_regions: torch.Tensor,
    assignment: GroupAssignment,
    coarse_regions: torch.Tensor,
    eps: float = KL_EPS,
) -> torch.Tensor:
    """Mean over groups (and batch) of ``KL(coarse_i || fine_i)``.

    ``fine_regions`` are one layer's ``[B, m, h, w]`` region maps, combined per
    group by ``assignment``; ``coarse_regions`` are the already grouped
    ``[B, n, h, w]`` maps of the last layer and act as the target
    distribution, so a grouped fine map is penalised wherever it misses
    coarse mass. Each map is floored by adding ``eps`` (negative values count
    as zero) and renormalised over the grid before the divergence.

    A group whose coarse map has no mass in an image contributes zero, the
    value of the divergence from a zero measure. Flooring it instead would
    turn it into a uniform target that rewards fine maps for covering the
    whole grid.
    """
    if fine_regions.shape[-2:] != coarse_regions.shape[-2:]:
        raise InputError(
            f"grid mismatch: fine {tuple(fine_regions.shape[-2:])} vs coarse {tuple(coarse_regions.shape[-2:])}"
        )
    terms = kl_terms(coarse_regions, grouped_regions(fine_regions, assignment), eps)
    present = coarse_regions.flatten(-2).gt(0).any(-1)
    return (terms * present).mean()


def kl_terms(p_maps: torch.Tensor, q_maps: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """Per-map ``KL(p || q)`` for ``[..., h, w]`` maps; shape ``[...]``."""
    p = _spatial_distribution(p_maps, eps)
    q = _spatial_distribution(q_maps, eps)
    return (p * (p.log() - q.log())).sum(-1)


def kl_between_maps(p_maps: torch.Tensor, q_maps: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """``KL(p || q)`` between ``[..., n, h, w]`` maps, averaged over all leading axes."""
    return kl_terms(p_maps, q_maps, eps).mean()
