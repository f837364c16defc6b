"""Dual cross-modal fusion.

Two stages. The interaction stage (cmim) reduces both modality feature
maps with a shared 1x1 conv, flattens them into position sequences, and
runs a stack of cross-modal attention blocks with the depth sequence as
query and the RGB sequence as key/value; a 1x1 conv expands the result
back to the backbone width. The preservation stage (spm) mixes the raw
modality maps back in through learnable residual weights:

    F1      = D0 + V (.) F0        per-channel V
    F_final = alpha * I0 + beta * F1

base_fuse (plain addition) and spm_swapped (modality roles exchanged) are
the ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import tensor as T
from .attention import AttentionConfig, CMAParams
from .tensor import Tensor

SPM_V_INIT = 0.01
SPM_ALPHA_INIT = 0.5
SPM_BETA_INIT = 0.5


@dataclass
class CMIMParams:
    """Shared channel-reduce conv, CMA stack, channel-expand conv."""

    reduce_w: Tensor               # C_i x C x 1 x 1
    reduce_b: Tensor               # C_i
    expand_w: Tensor               # C x C_i x 1 x 1
    expand_b: Tensor               # C
    cma_layers: list[CMAParams]
    config: AttentionConfig = field(default_factory=AttentionConfig)
    pe_each_layer: bool = True     # re-add positional encodings at every layer
    use_pos_encoding: bool = True

    @property
    def channels(self) -> int:
        return self.expand_w.shape[0]

    @property
    def reduced_channels(self) -> int:
        return self.reduce_w.shape[0]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.reduce.weight": self.reduce_w,
               f"{prefix}.reduce.bias": self.reduce_b,
               f"{prefix}.expand.weight": self.expand_w,
               f"{prefix}.expand.bias": self.expand_b}
        for i, layer in enumerate(self.cma_layers):
            out.update(layer.named_parameters(f"{prefix}.cma{i}"))
        return out


@dataclass
class SPMParams:
    v: Tensor          # length C
    alpha: Tensor      # scalar
    beta: Tensor       # scalar

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.V": self.v, f"{prefix}.alpha": self.alpha,
                f"{prefix}.beta": self.beta}


def init_cmim_params(channels: int, config: AttentionConfig,
                     rng: np.random.Generator, n_layers: int = 2,
                     use_pos_encoding: bool = True) -> CMIMParams:
    if n_layers not in (1, 2, 3):
        raise ValueError(f"cmim: unsupported CMA stack depth {n_layers}")
    ci = config.d_model
    return CMIMParams(
        reduce_w=T.uniform_init((ci, channels, 1, 1), channels, rng),
        reduce_b=T.uniform_init((ci,), channels, rng),
        expand_w=T.uniform_init((channels, ci, 1, 1), ci, rng),
        expand_b=T.uniform_init((channels,), ci, rng),
        cma_layers=[att.init_cma_params(config, rng) for _ in range(n_layers)],
        config=config,
        use_pos_encoding=use_pos_encoding,
    )


def init_spm_params(channels: int) -> SPMParams:
    return SPMParams(
        v=T.parameter(np.full(channels, SPM_V_INIT)),
        alpha=T.parameter(np.asarray(SPM_ALPHA_INIT)),
        beta=T.parameter(np.asarray(SPM_BETA_INIT)),
    )


def _to_sequence(x: Tensor) -> Tensor:
    """C x H x W map -> (H*W) x C row sequence, row-major positions."""
    c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h * w)))


def _to_map(seq: Tensor, h: int, w: int) -> Tensor:
    n, c = seq.shape
    return T.reshape(T.transpose(seq), (c, h, w))


def cmim(i0: Tensor, d0: Tensor, params: CMIMParams) -> Tensor:
    """Cross-modal interaction: depth queries attend into RGB keys/values."""
    if i0.shape != d0.shape:
        raise T.ShapeError(f"cmim: modality shapes differ: {i0.shape} vs {d0.shape}")
    if i0.data.ndim != 3 or i0.shape[0] != params.channels:
        raise T.ShapeError(f"cmim: expected {params.channels} x H x W maps, "
                           f"got {i0.shape}")
    _, h, w = i0.shape
    i_seq = _to_sequence(T.conv2d(i0, params.reduce_w, params.reduce_b))
    d_seq = _to_sequence(T.conv2d(d0, params.reduce_w, params.reduce_b))
    if params.use_pos_encoding:
        pe = T.tensor(att.pos_encoding_2d(h, w, params.config.d_model))
    else:
        pe = T.tensor(np.zeros((h * w, params.config.d_model)))
    zero = T.tensor(np.zeros((h * w, params.config.d_model)))
    q = d_seq
    for i, layer in enumerate(params.cma_layers):
        use_pe = pe if (i == 0 or params.pe_each_layer) else zero
        q = att.cma_block(q, i_seq, layer, use_pe, use_pe)
    return T.conv2d(_to_map(q, h, w), params.expand_w, params.expand_b)


def _check_spm_shapes(f0: Tensor, i0: Tensor, d0: Tensor, params: SPMParams) -> None:
    if not (f0.shape == i0.shape == d0.shape):
        raise T.ShapeError(f"spm: input shapes differ: {f0.shape}, {i0.shape}, "
                           f"{d0.shape}")
    if f0.data.ndim != 3 or params.v.shape != (f0.shape[0],):
        raise T.ShapeError(f"spm: filter vector {params.v.shape} does not match "
                           f"{f0.shape[0]} channels")


def _per_channel(v: Tensor, like: Tensor) -> Tensor:
    c = v.shape[0]
    return T.broadcast_to(T.reshape(v, (c, 1, 1)), like.shape)


def spm(f0: Tensor, i0: Tensor, d0: Tensor, params: SPMParams) -> Tensor:
    """Specificity-preserving mix: F_final = alpha*I0 + beta*(D0 + V(.)F0)."""
    _check_spm_shapes(f0, i0, d0, params)
    f1 = T.add(d0, T.mul(_per_channel(params.v, f0), f0))
    return T.add(T.mul(T.broadcast_to(params.alpha, i0.shape), i0),
                 T.mul(T.broadcast_to(params.beta, f1.shape), f1))


def spm_swapped(f0: Tensor, i0: Tensor, d0: Tensor, params: SPMParams) -> Tensor:
    """Order ablation: F1 built from RGB, depth carried by alpha."""
    _check_spm_shapes(f0, i0, d0, params)
    f1 = T.add(i0, T.mul(_per_channel(params.v, f0), f0))
    return T.add(T.mul(T.broadcast_to(params.alpha, d0.shape), d0),
                 T.mul(T.broadcast_to(params.beta, f1.shape), f1))


def base_fuse(i0: Tensor, d0: Tensor) -> Tensor:
    """Ablation baseline: plain element-wise addition."""
    if i0.shape != d0.shape:
        raise T.ShapeError(f"base_fuse: shapes differ: {i0.shape} vs {d0.shape}")
    return T.add(i0, d0)
