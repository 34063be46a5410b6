"""
Transformer tracking backbone over template/search patch tokens
"""

import math
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from lib.config import parse_int_list
from lib.nn import Conv2d, LayerNorm, Linear, Module, Parameter
from lib.tensor import (
    Tensor, as_tensor, attention, concat, leaky_relu, reshape, transpose
)


class BackboneError(ValueError):
    """Bad backbone input or configuration"""
    pass


class BackboneConfig(BaseModel):
    """Geometry and width of the tracking backbone"""

    template_size: int = Field(default=32, gt=0, description="Template crop side in pixels")
    search_size: int = Field(default=64, gt=0, description="Search crop side in pixels")
    patch_size: int = Field(default=8, gt=0, description="Patch side in pixels")
    embed_dim: int = Field(default=64, gt=0, description="Token width")
    heads: int = Field(default=4, gt=0, description="Self-attention heads")
    blocks: int = Field(default=12, gt=0, description="Transformer blocks")
    mlp_ratio: int = Field(default=2, gt=0, description="MLP hidden width multiplier")
    in_channels: int = Field(default=3, gt=0, description="3 for false color, 6 for material maps")
    injection_layers: List[int] = Field(default=[1, 2, 4, 6, 8, 10, 12],
                                        description="Blocks that receive a prompt before running")

    @field_validator("injection_layers", mode="before")
    @classmethod
    def validate_injection_layers(cls, v) -> List[int]:
        """Accept '1,2,4' strings as well as lists"""
        return sorted(set(parse_int_list(v)))

    @model_validator(mode="after")
    def validate_geometry(self) -> "BackboneConfig":
        for name, size in (("template", self.template_size), ("search", self.search_size)):
            if size % self.patch_size:
                raise ValueError(f"{name} size {size} is not a multiple of patch size {self.patch_size}")
            if (size // self.patch_size) % 2:
                raise ValueError(f"{name} grid {size // self.patch_size} must be even-sided")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        bad = [l for l in self.injection_layers if not 1 <= l <= self.blocks]
        if bad:
            raise ValueError(f"Injection layers {bad} outside 1..{self.blocks}")
        return self

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch_size

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch_size

    @property
    def template_tokens(self) -> int:
        return self.template_grid ** 2

    @property
    def search_tokens(self) -> int:
        return self.search_grid ** 2


class TokenState(NamedTuple):
    """Backbone tokens (B, Nt + Ns, D), template first, plus the final-block attention"""
    tokens: Tensor
    attention: Optional[np.ndarray] = None


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tuple[Tensor, np.ndarray]:
        batch, tokens, dim = x.shape
        head_dim = dim // self.heads
        qkv = reshape(self.qkv(x), (batch, tokens, 3, self.heads, head_dim))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        out, weights = attention(qkv[0], qkv[1], qkv[2])
        out = reshape(transpose(out, (0, 2, 1, 3)), (batch, tokens, dim))
        return self.proj(out), weights.data


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(leaky_relu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))"""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tuple[Tensor, np.ndarray]:
        attended, weights = self.attn(self.norm1(x))
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, weights


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        dim = config.embed_dim
        self.patch_embed = Conv2d(config.in_channels, dim, config.patch_size, rng, stride=config.patch_size)
        self.pos_template = Parameter(0.02 * rng.standard_normal((config.template_tokens, dim)))
        self.pos_search = Parameter(0.02 * rng.standard_normal((config.search_tokens, dim)))
        self.blocks = [Block(dim, config.heads, config.mlp_ratio, rng) for _ in range(config.blocks)]
        self.norm = LayerNorm(dim)


def _check_image(image: Tensor, channels: int, size: int, role: str) -> Tensor:
    image = as_tensor(image)
    if image.ndim == 3:
        image = reshape(image, (1,) + image.shape)
    if image.ndim != 4 or image.shape[1] != channels or image.shape[2:] != (size, size):
        raise BackboneError(f"{role} image must be ({channels}, {size}, {size}), got {image.shape}")
    return image


def _tokens(image: Tensor, backbone: Backbone, pos: Parameter) -> Tensor:
    grid = backbone.patch_embed(image)
    batch, dim = grid.shape[:2]
    flat = transpose(reshape(grid, (batch, dim, -1)), (0, 2, 1))
    return flat + pos


def embed_pair(template: Tensor, search: Tensor, backbone: Backbone) -> TokenState:
    """Patch-embed both crops and concatenate their tokens, template first"""
    config = backbone.config
    template = _check_image(template, config.in_channels, config.template_size, "template")
    search = _check_image(search, config.in_channels, config.search_size, "search")
    if template.shape[0] != search.shape[0]:
        raise BackboneError(f"Batch sizes differ: {template.shape[0]} vs {search.shape[0]}")

    tokens = concat([
        _tokens(template, backbone, backbone.pos_template),
        _tokens(search, backbone, backbone.pos_search),
    ], axis=1)
    return TokenState(tokens=tokens)


def block_forward(tokens: Tensor, layer: int, backbone: Backbone) -> TokenState:
    """Run block `layer` (1-based); the final block keeps its attention weights"""
    if not 1 <= layer <= len(backbone.blocks):
        raise BackboneError(f"Layer {layer} outside 1..{len(backbone.blocks)}")
    out, weights = backbone.blocks[layer - 1](tokens)
    record = weights if layer == len(backbone.blocks) else None
    return TokenState(tokens=out, attention=record)


def split_regions(tokens: Tensor, config: BackboneConfig) -> Tuple[Tensor, Tensor]:
    """Token sequence -> (template grid, search grid), each (B, D, g, g)"""
    batch, _, dim = tokens.shape
    nt = config.template_tokens

    def to_grid(part: Tensor, side: int) -> Tensor:
        return reshape(transpose(part, (0, 2, 1)), (batch, dim, side, side))

    return (to_grid(tokens[:, :nt], config.template_grid),
            to_grid(tokens[:, nt:], config.search_grid))


def merge_regions(template_grid: Tensor, search_grid: Tensor) -> Tensor:
    """Inverse of split_regions"""
    def to_tokens(grid: Tensor) -> Tensor:
        batch, dim = grid.shape[:2]
        return transpose(reshape(grid, (batch, dim, -1)), (0, 2, 1))

    return concat([to_tokens(template_grid), to_tokens(search_grid)], axis=1)


def search_scores(state: TokenState, config: BackboneConfig) -> np.ndarray:
    """Mean attention each search token receives from template tokens, (B, Ns)"""
    if state.attention is None:
        raise BackboneError("No attention record: run the final block first")
    nt = config.template_tokens
    received = state.attention[:, :, :nt, nt:]
    return received.mean(axis=(1, 2))


def mask_from_scores(scores: np.ndarray, rho: float) -> np.ndarray:
    """V = 0 on the ceil(rho * K) highest scores (ties to the lower index), 1 elsewhere"""
    if not 0.0 < rho <= 1.0:
        raise BackboneError(f"rho must be in (0, 1], got {rho}")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    count = scores.shape[-1]
    keep = math.ceil(rho * count)
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :keep]
    mask = np.ones_like(scores)
    np.put_along_axis(mask, order, 0.0, axis=-1)
    return mask


def box_cell_mask(boxes: np.ndarray, grid: int, patch_size: int) -> np.ndarray:
    """V = 0 on cells whose centers fall inside the box (x, y, w, h), shape (B, g, g)"""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    centers = (np.arange(grid) + 0.5) * patch_size
    x, y, w, h = (boxes[:, i][:, None, None] for i in range(4))
    inside_x = (centers[None, None, :] >= x) & (centers[None, None, :] < x + w)
    inside_y = (centers[None, :, None] >= y) & (centers[None, :, None] < y + h)
    return np.where(inside_x & inside_y, 0.0, 1.0)


def relevance_mask(state: TokenState, rho: float, config: BackboneConfig,
                   gt_box: Optional[np.ndarray] = None) -> np.ndarray:
    """Binary search-grid mask (B, g, g): 0 target-relevant, 1 background"""
    grid = config.search_grid
    if gt_box is not None:
        return box_cell_mask(gt_box, grid, config.patch_size)
    scores = search_scores(state, config)
    return mask_from_scores(scores, rho).reshape(-1, grid, grid)


def upsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling of (B, g, g) cell masks to pixels"""
    return np.repeat(np.repeat(mask, factor, axis=-2), factor, axis=-1)


def false_color(cube: np.ndarray) -> np.ndarray:
    """Three-channel rendering: band means over three contiguous band groups

    When the band count is not a multiple of three the leading groups take one
    extra band each, so 16 bands split 6/5/5.
    """
    cube = np.asarray(cube, dtype=np.float64)
    groups = np.array_split(np.arange(cube.shape[-3]), 3)
    return np.stack([cube[..., g, :, :].mean(axis=-3) for g in groups], axis=-3)
