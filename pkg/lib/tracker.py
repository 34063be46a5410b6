"""
Composed material-prompted tracker: unmixing, decomposition, prompted backbone and head
"""

from typing import NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from lib.backbone import (
    Backbone, BackboneConfig, TokenState, block_forward, embed_pair, false_color,
    relevance_mask, split_regions
)
from lib.nn import Module
from lib.objectives import CenterHead, HeadOutputs, head_forward
from lib.prompts import PromptConfig, PromptStack, RegionPair, inject, material_patch_embed
from lib.tensor import Tensor, as_tensor, concat
from lib.unmixing import AMD_VARIANTS, AbundanceDecomposer, FrequencyBranches, UnmixNet, decode, encode

INPUT_MODES = ("false_color", "material")


class TrackerConfig(BaseModel):
    """Architecture of the composed model; ablation switches live here"""

    bands: int = Field(default=16, ge=2, description="Spectral bands of the input cubes")
    endmembers: int = Field(default=6, ge=2, description="Endmembers estimated by the unmixing network (r)")
    encoder_hidden: tuple = Field(default=(32, 16), description="Hidden widths of the unmixing encoder")
    encoder_variant: str = Field(default="mlp", description="Unmixing encoder: mlp|conv")
    amd_variant: str = Field(default="haar", description="Abundance decomposition variant")
    unmixing: bool = Field(default=True, description="Use the unmixing network; off projects the cube directly")
    prompts: bool = Field(default=True, description="Inject material prompts into the backbone")
    input_mode: str = Field(default="false_color", description="Backbone input: false_color|material")
    head_channels: int = Field(default=64, gt=0, description="Width of the head conv stacks")
    head_depth: int = Field(default=5, gt=0, description="Conv-BN-ReLU layers per head branch")
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    prompt: PromptConfig = Field(default_factory=PromptConfig)
    seed: int = Field(default=0, ge=0, description="Initialization seed")

    @field_validator("encoder_hidden", mode="before")
    @classmethod
    def validate_hidden(cls, v) -> tuple:
        if isinstance(v, str):
            v = [int(x) for x in v.split(",") if x.strip()]
        v = tuple(int(x) for x in v)
        if len(v) != 2 or min(v) <= 0:
            raise ValueError("encoder_hidden needs two positive widths")
        return v

    @field_validator("amd_variant")
    @classmethod
    def validate_amd(cls, v: str) -> str:
        if v not in AMD_VARIANTS:
            raise ValueError(f"amd_variant must be one of {AMD_VARIANTS}")
        return v

    @field_validator("input_mode")
    @classmethod
    def validate_input_mode(cls, v: str) -> str:
        if v not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        return v

    @model_validator(mode="after")
    def validate_channels(self) -> "TrackerConfig":
        expected = 3 if self.input_mode == "false_color" else 2 * self.prompt.branch_channels
        if self.backbone.in_channels != expected:
            self.backbone = self.backbone.model_copy(update={"in_channels": expected})
        return self


class ForwardOutputs(NamedTuple):
    head: HeadOutputs
    state: TokenState
    mask: np.ndarray
    recon_template: Optional[Tensor]
    recon_search: Optional[Tensor]


class MaterialTracker(Module):
    """Every submodule draws from its own child seed, so toggling one leaves the others' weights unchanged"""

    def __init__(self, config: TrackerConfig):
        self.config = config
        unmix_seed, amd_seed, backbone_seed, prompt_seed, head_seed = np.random.SeedSequence(config.seed).spawn(5)

        self.unmix = None
        if config.unmixing:
            self.unmix = UnmixNet(config.bands, config.endmembers, np.random.default_rng(unmix_seed),
                                  hidden=config.encoder_hidden, variant=config.encoder_variant)
        amd_inputs = config.endmembers if config.unmixing else config.bands
        self.decomposer = AbundanceDecomposer(amd_inputs, np.random.default_rng(amd_seed),
                                              branch_channels=config.prompt.branch_channels,
                                              variant=config.amd_variant)

        bb = config.backbone
        self.backbone = Backbone(bb, np.random.default_rng(backbone_seed))
        self.prompts = None
        if config.prompts:
            self.prompts = PromptStack(bb.embed_dim, bb.patch_size, bb.injection_layers,
                                       config.prompt, np.random.default_rng(prompt_seed))
        self.head = CenterHead(bb.embed_dim, np.random.default_rng(head_seed),
                               channels=config.head_channels, depth=config.head_depth)

    def material_branches(self, cube: Tensor):
        """(abundance branches, reconstruction or None) for one region"""
        if self.unmix is None:
            return self.decomposer(cube), None
        abundances = encode(cube, self.unmix)
        return self.decomposer(abundances), decode(abundances, self.unmix)

    def backbone_input(self, cube: Tensor, branches: FrequencyBranches) -> Tensor:
        if self.config.input_mode == "material":
            return concat([branches.low, branches.high], axis=1)
        return as_tensor(false_color(cube.data))

    def __call__(self, template: np.ndarray, search: np.ndarray, rho: float = 0.25,
                 gt_box: Optional[np.ndarray] = None) -> ForwardOutputs:
        return tracker_forward(self, template, search, rho, gt_box)


def tracker_forward(model: MaterialTracker, template: np.ndarray, search: np.ndarray,
                    rho: float = 0.25, gt_box: Optional[np.ndarray] = None) -> ForwardOutputs:
    """Template (B, n, 32, 32) and search (B, n, 64, 64) cubes -> head maps and mask V

    gt_box (B, 4) in search-crop pixels switches V to the ground-truth cells.
    """
    config = model.config.backbone
    template_cube, search_cube = as_tensor(template), as_tensor(search)
    if template_cube.ndim == 3:
        template_cube = template_cube.reshape((1,) + template_cube.shape)
        search_cube = search_cube.reshape((1,) + search_cube.shape)

    template_branches, recon_template = model.material_branches(template_cube)
    search_branches, recon_search = model.material_branches(search_cube)

    state = embed_pair(model.backbone_input(template_cube, template_branches),
                       model.backbone_input(search_cube, search_branches),
                       model.backbone)
    tokens = state.tokens
    prompts = None
    if model.prompts is not None:
        prompts = material_patch_embed(template_branches, search_branches, model.prompts.embed)

    for layer in range(1, config.blocks + 1):
        if prompts is not None and layer in model.prompts.injection_layers:
            features = RegionPair(*split_regions(tokens, config))
            prompts, fused = model.prompts.layer(layer)(prompts, features)
            tokens = inject(tokens, fused)
        state = block_forward(tokens, layer, model.backbone)
        tokens = state.tokens

    _, search_grid = split_regions(model.backbone.norm(tokens), config)
    head = head_forward(search_grid, model.head)
    mask = relevance_mask(state, rho, config, gt_box=gt_box)
    return ForwardOutputs(head=head, state=state, mask=mask,
                          recon_template=recon_template, recon_search=recon_search)
