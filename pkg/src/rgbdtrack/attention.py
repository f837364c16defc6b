"""Cross-modal attention building blocks.

Sequences are rank-2 tensors, one row per spatial position. The block
layout is post-norm: the residual sum is normalized, queries and keys get
a fixed 2D sine/cosine positional encoding before projection, and there is
no self-attention anywhere (the block attends from one modality into the
other only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    h: int = 4
    d_model: int = 64
    d_k: int = 16
    d_v: int = 16
    ffn_hidden: int = 0          # 0 means the 4*d_model default
    layer_norm_epsilon: float = 1e-5
    # Add positional encodings to attention values as well as queries/keys.
    # Kept off by default: values carry appearance, not location.
    pe_on_values: bool = False

    def __post_init__(self):
        if self.ffn_hidden == 0:
            object.__setattr__(self, "ffn_hidden", 4 * self.d_model)

    def validate(self) -> None:
        if self.h < 1 or self.d_model < 1 or self.d_k < 1 or self.d_v < 1:
            raise ValueError(f"attention config has non-positive dimension: {self}")


PAPER_ATTENTION = AttentionConfig(h=8, d_model=256, d_k=32, d_v=32)
DESK_ATTENTION = AttentionConfig(h=4, d_model=64, d_k=16, d_v=16)


@dataclass
class MHAParams:
    """Per-head projections plus the shared output projection."""

    wq: list[Tensor]   # h matrices, each d_model x d_k
    wk: list[Tensor]   # h matrices, each d_model x d_k
    wv: list[Tensor]   # h matrices, each d_model x d_v
    wo: Tensor         # (h * d_v) x d_model

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (q, k, v) in enumerate(zip(self.wq, self.wk, self.wv)):
            out[f"{prefix}.wq{i}"] = q
            out[f"{prefix}.wk{i}"] = k
            out[f"{prefix}.wv{i}"] = v
        out[f"{prefix}.wo"] = self.wo
        return out


@dataclass
class FFNParams:
    w1: Tensor   # d_model x ffn_hidden
    b1: Tensor   # ffn_hidden
    w2: Tensor   # ffn_hidden x d_model
    b2: Tensor   # d_model

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class CMAParams:
    mha: MHAParams
    ffn: FFNParams
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    config: AttentionConfig = field(default_factory=AttentionConfig)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.mha.named_parameters(f"{prefix}.mha")
        out.update(self.ffn.named_parameters(f"{prefix}.ffn"))
        out[f"{prefix}.norm1.gamma"] = self.norm1_gamma
        out[f"{prefix}.norm1.beta"] = self.norm1_beta
        out[f"{prefix}.norm2.gamma"] = self.norm2_gamma
        out[f"{prefix}.norm2.beta"] = self.norm2_beta
        return out


def init_mha_params(config: AttentionConfig, rng: np.random.Generator) -> MHAParams:
    d, dk, dv = config.d_model, config.d_k, config.d_v
    wq = [T.uniform_init((d, dk), d, rng) for _ in range(config.h)]
    wk = [T.uniform_init((d, dk), d, rng) for _ in range(config.h)]
    wv = [T.uniform_init((d, dv), d, rng) for _ in range(config.h)]
    wo = T.uniform_init((config.h * dv, d), config.h * dv, rng)
    return MHAParams(wq, wk, wv, wo)


def init_cma_params(config: AttentionConfig, rng: np.random.Generator) -> CMAParams:
    d, hidden = config.d_model, config.ffn_hidden
    ffn = FFNParams(
        w1=T.uniform_init((d, hidden), d, rng),
        b1=T.uniform_init((hidden,), d, rng),
        w2=T.uniform_init((hidden, d), hidden, rng),
        b2=T.uniform_init((d,), hidden, rng),
    )
    return CMAParams(
        mha=init_mha_params(config, rng),
        ffn=ffn,
        norm1_gamma=T.parameter(np.ones(d)),
        norm1_beta=T.parameter(np.zeros(d)),
        norm2_gamma=T.parameter(np.ones(d)),
        norm2_beta=T.parameter(np.zeros(d)),
        config=config,
    )


def sdpa(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_k)) V over row sequences."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise T.ShapeError(f"sdpa: expected rank-2 sequences, got "
                           f"{q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise T.ShapeError(f"sdpa: query width {q.shape} vs key width {k.shape}")
    if k.shape[0] != v.shape[0] or k.shape[0] < 1:
        raise T.ShapeError(f"sdpa: key count {k.shape} vs value count {v.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return T.matmul(T.softmax(scores, axis=1), v)


def mha(q: Tensor, k: Tensor, v: Tensor, params: MHAParams,
        config: AttentionConfig) -> Tensor:
    d = config.d_model
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise T.ShapeError(f"mha: expected width {d}, got "
                           f"{q.shape}, {k.shape}, {v.shape}")
    if len(params.wq) != config.h or params.wo.shape != (config.h * config.d_v, d):
        raise T.ShapeError(f"mha: params built for h={len(params.wq)}, "
                           f"wo={params.wo.shape}; config wants h={config.h}, "
                           f"d_model={d}")
    heads = [sdpa(T.matmul(q, params.wq[i]), T.matmul(k, params.wk[i]),
                  T.matmul(v, params.wv[i]))
             for i in range(config.h)]
    return T.matmul(T.concat(heads, axis=1), params.wo)


def _add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    return T.add(x, T.broadcast_to(T.reshape(b, (1, b.shape[0])), x.shape))


def ffn(x: Tensor, params: FFNParams) -> Tensor:
    if x.shape[1] != params.w1.shape[0]:
        raise T.ShapeError(f"ffn: input width {x.shape} vs first map {params.w1.shape}")
    h = T.relu(_add_row_bias(T.matmul(x, params.w1), params.b1))
    return _add_row_bias(T.matmul(h, params.w2), params.b2)


def pos_encoding_2d(h: int, w: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine encoding of a flattened H x W grid, row-major.

    The first d_model/2 channels depend only on the row index, the last
    d_model/2 only on the column; within each half, even channels are
    sines and odd channels cosines at geometrically spaced wavelengths.
    """
    if d_model % 4 != 0:
        raise ValueError(f"pos_encoding_2d: d_model={d_model} not divisible by 4")
    half = d_model // 2
    i = np.arange(half)
    freq = 1.0 / np.power(10000.0, 2.0 * (i // 2) / half)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h * w, d_model))
    for part, coord in ((slice(0, half), rows.reshape(-1)),
                        (slice(half, d_model), cols.reshape(-1))):
        t = coord[:, None] * freq[None, :]
        block = np.empty((h * w, half))
        block[:, 0::2] = np.sin(t[:, 0::2])
        block[:, 1::2] = np.cos(t[:, 1::2])
        out[:, part] = block
    return out


def cma_block(d_seq: Tensor, i_seq: Tensor, params: CMAParams,
              pe_d: Tensor | None, pe_i: Tensor | None) -> Tensor:
    """Cross-modal attention block: query side d_seq attends into i_seq.

    f_t = LayerNorm(D + MHA(D + pe_D, I + pe_I, I)); output is
    LayerNorm(f_t + FFN(f_t)). Positional encodings go on queries and keys
    only unless the config says otherwise.
    """
    cfg = params.config
    if d_seq.shape[1] != cfg.d_model or i_seq.shape[1] != cfg.d_model:
        raise T.ShapeError(f"cma_block: widths {d_seq.shape}/{i_seq.shape} "
                           f"vs d_model={cfg.d_model}")
    if pe_d is None or pe_i is None:
        raise ValueError("cma_block: positional encodings are required; "
                         "pass zero tensors to disable them explicitly")
    q = T.add(d_seq, pe_d)
    k = T.add(i_seq, pe_i)
    v = T.add(i_seq, pe_i) if cfg.pe_on_values else i_seq
    eps = cfg.layer_norm_epsilon
    f_t = T.layer_norm(T.add(d_seq, mha(q, k, v, params.mha, cfg)),
                       params.norm1_gamma, params.norm1_beta, eps=eps)
    return T.layer_norm(T.add(f_t, ffn(f_t, params.ffn)),
                        params.norm2_gamma, params.norm2_beta, eps=eps)
