"""Length-free Transformer encoder.

All L flows of a window are encoded in one pass. Attention is computed per
flow block: each flow attends only to its own packets (restricted to a
temporal neighbourhood), and each packet row of a flow block is shifted by
the sum, over the other flows, of the largest logit that packet has toward
that flow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .engine import LEAKY_SLOPE, block_row_max, layer_norm, leaky_relu, linear, masked_softmax_rows
from .errors import BadDegree, ConfigError, ShapeMismatch
from .windowing import N_FEATURES

MODES = ("dual_attention", "vanilla")


@dataclass
class EncoderConfig:
    d_embed: int = 32
    heads: int = 8
    ffn_neurons: int = 512
    neighbourhood_k: int = 32
    n: int = 128
    mode: str = "dual_attention"
    leaky_slope: float = LEAKY_SLOPE
    cross_injection: bool = True

    def __post_init__(self):
        if self.d_embed % self.heads:
            raise ConfigError(f"d_embed {self.d_embed} not divisible by heads {self.heads}")
        if not 0 < self.neighbourhood_k < self.n:
            raise BadDegree(f"need 0 < k < n, got k={self.neighbourhood_k}, n={self.n}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    @property
    def d_head(self) -> int:
        return self.d_embed // self.heads


def positional_table(n: int, d: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal table: even columns sin, odd columns cos."""
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return pe.to(dtype)


def neighbourhood_mask(n: int, k: int) -> torch.Tensor:
    if not 0 < k < n:
        raise BadDegree(f"need 0 < k < n, got k={k}, n={n}")
    idx = torch.arange(n)
    return (idx.unsqueeze(0) - idx.unsqueeze(1)).abs() <= k


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, dtype=torch.float64, generator: torch.Generator | None = None):
        super().__init__()
        c = config
        self.config = c
        d, h, dh, f = c.d_embed, c.heads, c.d_head, c.ffn_neurons

        def p(*shape, fan_in=None):
            if fan_in is None:
                return nn.Parameter(torch.zeros(*shape, dtype=dtype))
            bound = 1.0 / math.sqrt(fan_in)
            return nn.Parameter((torch.rand(*shape, dtype=dtype, generator=generator) * 2 - 1) * bound)

        self.embed_w = p(N_FEATURES, d, fan_in=N_FEATURES)
        self.embed_b = p(d)
        self.wq = p(h, d, dh, fan_in=d)
        self.wk = p(h, d, dh, fan_in=d)
        self.wv = p(h, d, dh, fan_in=d)
        self.wo = p(d, d, fan_in=d)
        self.ffn_w1 = p(d, f, fan_in=d)
        self.ffn_b1 = p(f)
        self.ffn_w2 = p(f, d, fan_in=f)
        self.ffn_b2 = p(d)
        self.ln1_g = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln1_b = p(d)
        self.ln2_g = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln2_b = p(d)
        self.lnf_g = nn.Parameter(torch.ones(c.n, dtype=dtype))
        self.lnf_b = p(c.n)
        self.register_buffer("pe", positional_table(c.n, d, dtype), persistent=False)
        self.register_buffer("nmask", neighbourhood_mask(c.n, c.neighbourhood_k), persistent=False)
        self.register_buffer("full_mask", torch.ones(c.n, c.n, dtype=torch.bool), persistent=False)
        self._other: dict[int, torch.Tensor] = {}

    def other_flows(self, L: int) -> torch.Tensor:
        """(1, L, 1, L) selector that is 1 where g != f."""
        if L not in self._other:
            self._other[L] = (1 - torch.eye(L, dtype=self.wq.dtype)).view(1, L, 1, L)
        return self._other[L]

    def forward(self, features: torch.Tensor, L: int, details: dict | None = None) -> torch.Tensor:
        return encoder_forward(features, L, self, details)


def embed_and_position(features: torch.Tensor, params: Encoder) -> torch.Tensor:
    n = params.config.n
    if features.ndim != 2 or features.shape[1] != N_FEATURES or features.shape[0] % n:
        raise ShapeMismatch(f"features must be (n*L, {N_FEATURES}) with n={n}, got {tuple(features.shape)}")
    x = linear(features, params.embed_w, params.embed_b)
    L = features.shape[0] // n
    # positions restart at 0 for every flow block
    return (x.view(L, n, -1) + params.pe).view(L * n, -1)


def dual_attention(x: torch.Tensor, L: int, params: Encoder, details: dict | None = None) -> torch.Tensor:
    """Block-wise multi-head attention over L flows of n packets each.

    Per head, every packet row of flow f's own logit block is shifted by the
    sum over other flows g of that row's largest logit toward g; the block is
    then neighbourhood-masked, softmax-normalised per row and applied to f's
    values. Only per-row block maxima of the off-diagonal logits are formed.

    ``details`` (optional) receives the own-flow attention weights
    (h, L, n, n), the pooled maxima (h, L, n, L) with their argmax positions,
    and the injected per-row shift (h, L, n).
    """
    c = params.config
    n, h, dh = c.n, c.heads, c.d_head
    if x.shape[0] != n * L:
        raise ShapeMismatch(f"expected {n * L} rows, got {x.shape[0]}")
    q = torch.einsum("rd,hde->hre", x, params.wq) * (1.0 / math.sqrt(dh))  # (h, nL, dh), pre-scaled
    k = torch.einsum("rd,hde->hre", x, params.wk)
    v = torch.einsum("rd,hde->hre", x, params.wv)
    qf, kf, vf = (t.reshape(h, L, n, dh) for t in (q, k, v))
    logits = torch.matmul(qf, kf.transpose(-1, -2))  # (h, L, n, n) own-flow blocks

    dual = c.mode == "dual_attention"
    pooled = argmax = shift = None
    if dual and c.cross_injection and L > 1:
        # only per-row block maxima of the off-diagonal logits are ever kept
        pooled, argmax = block_row_max(q, k, n)
        pooled = pooled.reshape(h, L, n, L)  # [head, f, i, g]
        shift = (pooled * params.other_flows(L)).sum(dim=-1, keepdim=True)
        logits = logits + shift
    attn = masked_softmax_rows(logits, params.nmask if dual else params.full_mask)
    out = torch.matmul(attn, vf)  # (h, L, n, dh)
    out = out.permute(1, 2, 0, 3).reshape(L * n, h * dh)
    if details is not None:
        details["attention"] = attn.detach()
        details["cross_max"] = None if pooled is None else pooled.detach()
        details["cross_argmax"] = None if argmax is None else argmax.reshape(h, L, n, L)
        details["injected"] = None if shift is None else shift.detach().squeeze(-1)
    return linear(out, params.wo)


def encoder_forward(features: torch.Tensor, L: int, params: Encoder, details: dict | None = None) -> torch.Tensor:
    """Encode L flows; returns an (L, n) tensor, one row per flow."""
    c = params.config
    x0 = embed_and_position(features, params)
    if x0.shape[0] != c.n * L:
        raise ShapeMismatch(f"features hold {x0.shape[0] // c.n} flows, L={L}")
    x1 = layer_norm(x0 + dual_attention(x0, L, params, details), params.ln1_g, params.ln1_b)
    hidden = leaky_relu(linear(x1, params.ffn_w1, params.ffn_b1), c.leaky_slope)
    x2 = layer_norm(x1 + linear(hidden, params.ffn_w2, params.ffn_b2), params.ln2_g, params.ln2_b)
    pooled = x2.mean(dim=-1).view(L, c.n)
    return layer_norm(pooled, params.lnf_g, params.lnf_b)
