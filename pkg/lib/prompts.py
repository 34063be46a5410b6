"""
Material prompts: patch embedding, wavelet prompt blocks, frequency fusion and injection
"""

from typing import Dict, List, NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from lib.nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from lib.tensor import (
    Tensor, as_tensor, attention, concat, leaky_relu, reshape, transpose
)
from lib.unmixing import FrequencyBranches
from lib.wavelets import Subbands2D, WaveletError, haar2d, ihaar2d

LL_OPERATORS = ("attn", "conv")
HF_OPERATORS = ("conv", "attn")
FUSION_VARIANTS = ("fpfm", "add", "conv", "attention")


class PromptError(ValueError):
    """Prompt grid or channel mismatch"""
    pass


class PromptConfig(BaseModel):
    """Widths and operator choices of the prompt path"""

    branch_channels: int = Field(default=3, gt=0, description="Channels per material branch (c)")
    hf_hidden: int = Field(default=32, gt=0, description="Bottleneck width of the high-frequency fusion path")
    hf_groups: int = Field(default=4, gt=0, description="Groups of the 3x3 fusion convolution")
    fusion_latent: int = Field(default=32, gt=0, description="Latent width of the frequency fusion bottleneck")
    ll_operator: str = Field(default="attn", description="Low-frequency fusion operator: attn|conv")
    hf_operator: str = Field(default="conv", description="High-frequency fusion operator: conv|attn")
    fusion: str = Field(default="fpfm", description="Branch fusion: fpfm|add|conv|attention")
    identity: bool = Field(default=False, description="Fusion returns the prompt subbands unchanged")

    @field_validator("ll_operator")
    @classmethod
    def validate_ll_operator(cls, v: str) -> str:
        if v not in LL_OPERATORS:
            raise ValueError(f"ll_operator must be one of {LL_OPERATORS}")
        return v

    @field_validator("hf_operator")
    @classmethod
    def validate_hf_operator(cls, v: str) -> str:
        if v not in HF_OPERATORS:
            raise ValueError(f"hf_operator must be one of {HF_OPERATORS}")
        return v

    @field_validator("fusion")
    @classmethod
    def validate_fusion(cls, v: str) -> str:
        if v not in FUSION_VARIANTS:
            raise ValueError(f"fusion must be one of {FUSION_VARIANTS}")
        return v


class RegionPair(NamedTuple):
    """Per-region prompt grids, each (B, D, g, g)"""
    template: Tensor
    search: Tensor


class PromptState(NamedTuple):
    low: RegionPair
    high: RegionPair


def grid_to_tokens(grid: Tensor) -> Tensor:
    """(B, D, h, w) -> (B, h*w, D), row-major"""
    batch, dim = grid.shape[:2]
    return transpose(reshape(grid, (batch, dim, -1)), (0, 2, 1))


def tokens_to_grid(tokens: Tensor, height: int, width: int) -> Tensor:
    batch, _, dim = tokens.shape
    return reshape(transpose(tokens, (0, 2, 1)), (batch, dim, height, width))


class MaterialPatchEmbed(Module):
    """8-stride patch embedding, one convolution per frequency branch"""

    def __init__(self, channels: int, dim: int, patch_size: int, rng: np.random.Generator):
        self.channels = channels
        self.low = Conv2d(channels, dim, patch_size, rng, stride=patch_size)
        self.high = Conv2d(channels, dim, patch_size, rng, stride=patch_size)


def material_patch_embed(template: FrequencyBranches, search: FrequencyBranches,
                         embed: MaterialPatchEmbed) -> PromptState:
    """Layer-0 prompt grids for both branches and both regions"""
    for role, branches in (("template", template), ("search", search)):
        for maps in branches:
            if maps.ndim != 4 or maps.shape[1] != embed.channels:
                raise PromptError(f"{role} material maps must have {embed.channels} channels, got {maps.shape}")
    return PromptState(
        low=RegionPair(embed.low(template.low), embed.low(search.low)),
        high=RegionPair(embed.high(template.high), embed.high(search.high)),
    )


class CrossAttentionFusion(Module):
    """Single-head cross-attention, prompt as query, then residual and layer norm"""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, prompt: Tensor, feature: Tensor) -> Tensor:
        height, width = prompt.shape[2:]
        p = grid_to_tokens(prompt)
        h = grid_to_tokens(feature)
        attended, _ = attention(self.query(p), self.key(h), self.value(h))
        fused = self.norm(p + self.out(attended))
        return tokens_to_grid(fused, height, width)


class GroupConvFusion(Module):
    """[feature || prompt] -> 1x1 -> grouped 3x3, BN, LeakyReLU -> 1x1"""

    def __init__(self, dim: int, hidden: int, groups: int, rng: np.random.Generator):
        if hidden % groups:
            raise PromptError(f"Hidden width {hidden} is not divisible by {groups} groups")
        self.in_proj = Conv2d(2 * dim, hidden, 1, rng)
        self.group_conv = Conv2d(hidden, hidden, 3, rng, padding=1, groups=groups)
        self.bn = BatchNorm2d(hidden)
        self.out_proj = Conv2d(hidden, dim, 1, rng)

    def __call__(self, prompt: Tensor, feature: Tensor) -> Tensor:
        x = self.in_proj(concat([feature, prompt], axis=1))
        x = leaky_relu(self.bn(self.group_conv(x)))
        return self.out_proj(x)


def _fusion_operator(kind: str, config: PromptConfig, dim: int, rng: np.random.Generator) -> Module:
    if kind == "attn":
        return CrossAttentionFusion(dim, rng)
    return GroupConvFusion(dim, config.hf_hidden, config.hf_groups, rng)


class WmpBlock(Module):
    """Wavelet material prompt block for one frequency branch"""

    def __init__(self, dim: int, config: PromptConfig, rng: np.random.Generator):
        self.identity = config.identity
        self.ll = _fusion_operator(config.ll_operator, config, dim, rng)
        self.hf = {name: _fusion_operator(config.hf_operator, config, dim, rng)
                   for name in ("HL", "LH", "HH")}

    def __call__(self, prompt: Tensor, feature: Tensor) -> Tensor:
        return wmp_block(prompt, feature, self)


def wmp_block(prompt: Tensor, feature: Tensor, block: WmpBlock) -> Tensor:
    """Fuse a branch prompt grid with the backbone grid of the same region"""
    prompt, feature = as_tensor(prompt), as_tensor(feature)
    if prompt.shape != feature.shape:
        raise PromptError(f"Prompt grid {prompt.shape} and feature grid {feature.shape} differ")
    try:
        p = haar2d(prompt)
        h = haar2d(feature)
    except WaveletError as e:
        raise PromptError(str(e)) from e

    if block.identity:
        return ihaar2d(p)

    fused = Subbands2D(
        LL=block.ll(p.LL, h.LL),
        HL=block.hf["HL"](p.HL, h.HL),
        LH=block.hf["LH"](p.LH, h.LH),
        HH=block.hf["HH"](p.HH, h.HH),
    )
    return ihaar2d(fused)


class Fpfm(Module):
    """Frequency prompt fusion; every variant ends in a zero-initialized projection"""

    def __init__(self, dim: int, config: PromptConfig, rng: np.random.Generator):
        self.variant = config.fusion
        latent = config.fusion_latent
        if self.variant == "fpfm":
            self.down = Linear(2 * dim, latent, rng)
            self.middle = Linear(latent, latent, rng)
            self.up = Linear(latent, dim, rng, zero_init=True)
        elif self.variant == "conv":
            self.up = Conv2d(2 * dim, dim, 3, rng, padding=1, zero_init=True)
        elif self.variant == "attention":
            self.fuse = CrossAttentionFusion(dim, rng)
            self.up = Linear(dim, dim, rng, zero_init=True)
        else:
            self.up = Linear(dim, dim, rng, zero_init=True)

    def __call__(self, low: Tensor, high: Tensor) -> Tensor:
        """Fuse one region: grids (B, D, g, g) -> tokens (B, g*g, D)"""
        if self.variant == "fpfm":
            z0 = leaky_relu(self.down(grid_to_tokens(concat([low, high], axis=1))))
            z1 = self.middle(z0) + z0
            return self.up(leaky_relu(z1))
        if self.variant == "conv":
            return grid_to_tokens(self.up(concat([low, high], axis=1)))
        if self.variant == "attention":
            return self.up(grid_to_tokens(self.fuse(low, high)))
        return self.up(grid_to_tokens(low + high))


def fpfm(low: RegionPair, high: RegionPair, fuser: Fpfm) -> Tensor:
    """Fused prompt tokens (B, Nt + Ns, D) in backbone token order"""
    for region in ("template", "search"):
        a, b = getattr(low, region), getattr(high, region)
        if a.shape != b.shape:
            raise PromptError(f"{region} branch grids {a.shape} and {b.shape} differ")
    return concat([fuser(low.template, high.template), fuser(low.search, high.search)], axis=1)


def inject(tokens: Tensor, prompt: Tensor) -> Tensor:
    """Residual prompt injection H_p = H + P_f"""
    tokens, prompt = as_tensor(tokens), as_tensor(prompt)
    if tokens.shape != prompt.shape:
        raise PromptError(f"Cannot inject prompt {prompt.shape} into tokens {tokens.shape}")
    return tokens + prompt


class PromptLayer(Module):
    """One injection site: a WMP block per branch plus the fusion module

    Each branch block serves both the template and the search grid.
    """

    def __init__(self, dim: int, config: PromptConfig, rng: np.random.Generator):
        self.wmp_low = WmpBlock(dim, config, rng)
        self.wmp_high = WmpBlock(dim, config, rng)
        self.fpfm = Fpfm(dim, config, rng)

    def __call__(self, prompts: PromptState, features: RegionPair) -> Tuple[PromptState, Tensor]:
        low = RegionPair(self.wmp_low(prompts.low.template, features.template),
                         self.wmp_low(prompts.low.search, features.search))
        high = RegionPair(self.wmp_high(prompts.high.template, features.template),
                          self.wmp_high(prompts.high.search, features.search))
        return PromptState(low, high), fpfm(low, high, self.fpfm)


class PromptStack(Module):
    """Material embedding plus one PromptLayer per injection layer"""

    def __init__(self, dim: int, patch_size: int, injection_layers: List[int],
                 config: PromptConfig, rng: np.random.Generator):
        self.config = config
        self.injection_layers = list(injection_layers)
        self.embed = MaterialPatchEmbed(config.branch_channels, dim, patch_size, rng)
        self.layers: Dict[str, PromptLayer] = {
            str(layer): PromptLayer(dim, config, rng) for layer in self.injection_layers
        }

    def layer(self, index: int) -> PromptLayer:
        return self.layers[str(index)]
