"""Named constant bundles for the two supported model scales.

The paper-shaped profile mirrors the published architecture constants
(8 heads, 256-wide attention, 288px patches). The desk profile is the
same network shrunk until training and tracking run in minutes on a CPU;
it is the default everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .attention import AttentionConfig


@dataclass(frozen=True)
class Profile:
    name: str
    patch_size: int            # square input resolution
    stride: int                # total backbone downsampling factor n
    backbone_widths: tuple[int, int]
    channels: int              # backbone output channels C
    reduced_channels: int      # attention width C_i
    heads: int
    d_k: int
    d_v: int
    cma_layers: int = 2
    ffn_hidden: int = 0        # 0 -> attention default (4 * C_i)
    filter_size: int = 3       # classification filter extent, odd
    n_iter: int = 5            # filter-learning steps
    filter_step: float = 1.0   # multiple of the Cauchy step; monotone for < 2
    label_threshold: float = 0.05
    sigma_cells: float = 0.25  # Gaussian label sigma = 0.25*sqrt(area)/stride
    loss_lambda: float = 1e-2
    max_depth_mm: float = 10000.0
    crop_area_factor: float = 25.0   # square crop side = 5*sqrt(w*h)
    init_samples: int = 15
    memory_capacity: int = 30
    confidence_gate: float = 0.5
    normalize_features: bool = True  # channel-norm the fused map

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(h=self.heads, d_model=self.reduced_channels,
                               d_k=self.d_k, d_v=self.d_v,
                               ffn_hidden=self.ffn_hidden)

    @property
    def map_size(self) -> int:
        return self.patch_size // self.stride

    def validate(self) -> None:
        if self.patch_size % self.stride != 0:
            raise ValueError(f"profile {self.name}: patch size {self.patch_size} "
                             f"not divisible by stride {self.stride}")
        if self.filter_size % 2 != 1:
            raise ValueError(f"profile {self.name}: filter size must be odd")
        if not 0 < self.label_threshold < 1:
            raise ValueError(f"profile {self.name}: label threshold outside (0, 1)")


PAPER = Profile(
    name="paper", patch_size=288, stride=8, backbone_widths=(64, 128),
    channels=256, reduced_channels=256, heads=8, d_k=32, d_v=32,
)

DESK = Profile(
    name="desk", patch_size=96, stride=8, backbone_widths=(16, 32),
    channels=32, reduced_channels=64, heads=4, d_k=16, d_v=16,
)

PROFILES = {"paper": PAPER, "desk": DESK}


def get_profile(name: str, **overrides) -> Profile:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from "
                         f"{sorted(PROFILES)}") from None
    prof = replace(base, **overrides) if overrides else base
    prof.validate()
    return prof
