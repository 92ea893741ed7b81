"""Small Vision Transformer with deep prompt-injection points.

The last ``num_prompted_layers`` blocks receive prompt tokens. Prompts for a
block may be given as fixed tensors or produced on the fly from the patch
embeddings entering that block, which is how the concept machinery plugs in.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

PromptSource = Union[torch.Tensor, Callable[[int, torch.Tensor], torch.Tensor]]


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent shapes between components."""


class InputError(ValueError):
    """Input data does not match what the model was configured for."""


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_prompted_layers: int = 4
    class_count: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if not 0 <= self.num_prompted_layers <= self.depth:
            raise ConfigError(
                f"num_prompted_layers must be in [0, {self.depth}], got {self.num_prompted_layers}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def first_prompted_block(self) -> int:
        """Zero-based index of the first block that receives prompts."""
        return self.depth - self.num_prompted_layers

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerActivations:
    """Token outputs of one block, split by token role."""

    patch_embeddings: torch.Tensor  # [B, h*w, d]
    prompt_outputs: torch.Tensor  # [B, n_prompts, d], possibly zero-width
    class_token_output: torch.Tensor  # [B, d]


def reshape_to_grid(E: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Reshape ``[..., h*w, d]`` patch rows into a row-major ``[..., h, w, d]`` map."""
    if E.shape[-2] != h * w:
        raise InputError(f"expected {h * w} patch rows for a {h}x{w} grid, got {E.shape[-2]}")
    return E.reshape(*E.shape[:-2], h, w, E.shape[-1])


def flatten_grid(E_grid: torch.Tensor) -> torch.Tensor:
    return E_grid.reshape(*E_grid.shape[:-3], -1, E_grid.shape[-1])


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Pre-norm ViT. Token layout is ``[cls, patches..., prompts...]``.

    Prompt tokens carry no positional embedding. At every prompted block the
    prompt outputs of the previous block are dropped and replaced.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.num_patches, d))
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(d)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise InputError(
                f"expected images of shape [B, 3, {cfg.image_size}, {cfg.image_size}], got {tuple(images.shape)}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def forward_with_prompts(
        self, images: torch.Tensor, prompt_sets: Sequence[PromptSource] = ()
    ) -> tuple[list[LayerActivations], torch.Tensor]:
        """Run all blocks, injecting one prompt set per prompted block.

        ``prompt_sets[s]`` feeds block ``first_prompted_block + s``. A callable
        receives ``(s, E_grid)`` with ``E_grid`` the ``[B, h, w, d]`` patch
        embeddings entering that block and must return ``[B, n, d]`` prompts.

        Returns per-block activations and the final-block prompt outputs,
        layer-normalised, of shape ``[B, n, d]``.
        """
        cfg = self.config
        if len(prompt_sets) != cfg.num_prompted_layers:
            raise ConfigError(
                f"expected {cfg.num_prompted_layers} prompt sets, got {len(prompt_sets)}"
            )
        x = self.embed(images)
        n_base = 1 + cfg.num_patches
        acts = []
        for b, block in enumerate(self.blocks):
            s = b - cfg.first_prompted_block
            if s >= 0:
                source = prompt_sets[s]
                if callable(source):
                    grid = reshape_to_grid(x[:, 1:n_base], cfg.grid, cfg.grid)
                    prompts = source(s, grid)
                else:
                    prompts = source
                    if prompts.dim() == 2:
                        prompts = prompts.unsqueeze(0).expand(x.shape[0], -1, -1)
                if prompts.shape[-1] != cfg.embed_dim:
                    raise ConfigError(
                        f"prompt dimension {prompts.shape[-1]} != embed_dim {cfg.embed_dim}"
                    )
                x = torch.cat([x[:, :n_base], prompts.to(x.dtype)], dim=1)
            x = block(x)
            acts.append(
                LayerActivations(
                    patch_embeddings=x[:, 1:n_base],
                    prompt_outputs=x[:, n_base:],
                    class_token_output=x[:, 0],
                )
            )
        final_prompts = self.norm(x[:, n_base:])
        return acts, final_prompts

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Plain forward without prompts; returns the normalised class token."""
        x = self.embed(images)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[:, 0]
