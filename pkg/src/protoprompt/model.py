"""Full model: backbone, per-layer concept prompts, fusion and concept heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, ConfigError, VisionTransformer
from .concepts import (
    AttentionAndRegions,
    ConceptPrototypeSet,
    aggregate_prompts,
    compute_attention,
    compute_region_maps,
    empty_region_count,
)
from .fusion import FusionConfig, GroupAssignment, GroupingLayer, PromptFusion, consistency_loss, fuse_groups, grouped_regions
from .losses import (
    LossReport,
    LossWeights,
    concept_scores,
    entropy_loss,
    equivariance_from_maps,
    orthogonality_loss,
    presence_losses,
    total_loss,
    total_variation_loss,
)


@dataclass
class StageOutput:
    regions: AttentionAndRegions
    prompts: torch.Tensor  # [B, m, d]
    groups: GroupAssignment
    fused: torch.Tensor  # [B, n, d]
    empty_groups: torch.Tensor  # [B, n] bool


@dataclass
class ModelOutput:
    stages: list[StageOutput]
    final_prompts: torch.Tensor  # [B, n, d]
    concept_scores: torch.Tensor  # [B, n, C]
    logits: torch.Tensor  # [B, C]

    def coarse_regions(self) -> torch.Tensor:
        last = self.stages[-1]
        return grouped_regions(last.regions.region_maps, last.groups)


class ConceptPromptModel(nn.Module):
    def __init__(self, backbone: BackboneConfig, fusion: FusionConfig):
        super().__init__()
        if backbone.num_prompted_layers < 1:
            raise ConfigError("the model needs at least one prompted layer")
        if len(fusion.per_layer_m) != backbone.num_prompted_layers:
            raise ConfigError(
                f"per_layer_m has {len(fusion.per_layer_m)} entries for {backbone.num_prompted_layers} prompted layers"
            )
        self.backbone_config = backbone
        self.fusion_config = fusion
        d, grid = backbone.embed_dim, backbone.grid
        self.backbone = VisionTransformer(backbone)
        self.concepts = nn.ModuleList(
            ConceptPrototypeSet(m, d, grid, layer_index=s) for s, m in enumerate(fusion.per_layer_m)
        )
        self.grouping = nn.ModuleList(
            GroupingLayer(d, fusion.n, fusion.gumbel_temperature, fusion.hard_assignment)
            for _ in fusion.per_layer_m
        )
        self.fusion = nn.ModuleList(PromptFusion(d) for _ in fusion.per_layer_m)
        self.heads = nn.ModuleList(nn.Linear(d, backbone.class_count) for _ in range(fusion.n))

    @property
    def num_stages(self) -> int:
        return len(self.concepts)

    def forward(self, images: torch.Tensor, generator: torch.Generator | None = None) -> ModelOutput:
        stages: list[StageOutput] = []

        def make_prompts(s: int, E_grid: torch.Tensor) -> torch.Tensor:
            E_grid = F.layer_norm(E_grid, E_grid.shape[-1:])
            regions = compute_region_maps(compute_attention(E_grid, self.concepts[s]))
            prompts = aggregate_prompts(regions, E_grid)
            groups = self.grouping[s](prompts, generator)
            fused, empty = fuse_groups(prompts, groups, self.fusion[s])
            stages.append(StageOutput(regions, prompts, groups, fused, empty))
            return fused

        _, final = self.backbone.forward_with_prompts(images, [make_prompts] * self.num_stages)
        scores = concept_scores(final, self.heads)
        return ModelOutput(stages=stages, final_prompts=final, concept_scores=scores, logits=scores.mean(1))

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(slow, fast): prototypes, biases and backbone vs grouping, fusion and heads."""
        fast_ids = {id(p) for mod in (self.grouping, self.fusion, self.heads) for p in mod.parameters()}
        slow = [p for p in self.parameters() if id(p) not in fast_ids]
        fast = [p for p in self.parameters() if id(p) in fast_ids]
        return slow, fast

    def freeze_backbone(self, keep_tokens: bool = True):
        """Freeze backbone weights; class and position tokens stay trainable."""
        for name, p in self.backbone.named_parameters():
            p.requires_grad_(keep_tokens and name in ("cls_token", "pos_embed"))


def compute_losses(
    model: ConceptPromptModel,
    out: ModelOutput,
    out_transformed: ModelOutput | None,
    theta: torch.Tensor | None,
    labels: torch.Tensor,
    weights: LossWeights,
) -> tuple[LossReport, dict]:
    """Full objective for one batch plus per-step diagnostics.

    ``out_transformed`` is the forward pass on the warped batch; when it is
    ``None`` the equivariance term is zero.
    """
    cls = F.cross_entropy(out.logits, labels)
    coarse = out.coarse_regions()
    ps_terms, con_terms = [], []
    floored = 0
    for s, stage in enumerate(out.stages):
        A = stage.regions.attention
        fg, bg, n_floor = presence_losses(A)
        floored += n_floor
        if out_transformed is not None:
            eq = equivariance_from_maps(A, out_transformed.stages[s].regions.attention, theta)
        else:
            eq = A.new_zeros(())
        ps_terms.append(
            {
                "orthogonality": orthogonality_loss(model.concepts[s].prototypes),
                "equivariance": eq,
                "presence_fg": fg,
                "presence_bg": bg,
                "entropy": entropy_loss(A),
                "total_variation": total_variation_loss(A),
            }
        )
        if s < len(out.stages) - 1:
            con_terms.append(consistency_loss(stage.regions.region_maps, stage.groups, coarse))
    report = total_loss(cls, ps_terms, con_terms, weights)
    diagnostics = {
        "group_occupancy": [st.groups.members().sum(0).tolist() for st in out.stages],
        "empty_groups": [int(st.empty_groups.sum()) for st in out.stages],
        "empty_regions": [empty_region_count(st.regions) for st in out.stages],
        "consistency_per_layer": [float(c.detach()) for c in con_terms],
        "background_log_floored": floored,
    }
    return report, diagnostics
