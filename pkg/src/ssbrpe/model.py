"""Patch-based attention encoder with regression and pretraining heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import torch
from torch import nn

from . import numerics as nx
from .errors import CapacityError, ConfigError, NumericError
from .features import PATCH

PATCH_DIM = PATCH * PATCH


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 768
    n_layers: int = 12
    n_heads: int = 12
    mlp_ratio: int = 4
    max_patches: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 0 or self.max_patches < 1:
            raise ConfigError("n_layers must be >= 0 and max_patches >= 1")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small CPU-friendly configuration used by tests and the CLI default."""
        base = dict(embed_dim=64, n_layers=2, n_heads=4, mlp_ratio=4, max_patches=512, dropout=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def _trunc_normal(shape, generator: torch.Generator, std: float = 0.02) -> torch.Tensor:
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=generator)
    return t


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, generator: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(_trunc_normal((n_in, n_out), generator))
        self.bias = nn.Parameter(torch.zeros(n_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.matmul(x, self.weight) + self.bias


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.layer_norm(x, self.scale, self.shift)


class EncoderBlock(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x)) with GELU."""

    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.n_heads = cfg.n_heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, generator)
        self.attn_out = Linear(d, d, generator)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, generator)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, generator)
        self.dropout = cfg.dropout

    def attention(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h = self.n_heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nx.matmul(q * (d // h) ** -0.5, k.transpose(-1, -2))
        weights = nx.softmax(scores)
        ctx = nx.matmul(weights, v).transpose(1, 2).reshape(b, n, d)
        return self.attn_out(ctx), weights

    def forward(self, x: torch.Tensor, keep_attention: bool = False):
        a, weights = self.attention(self.ln1(x))
        if self.dropout and self.training:
            a = nn.functional.dropout(a, self.dropout)
        x = x + a
        f = self.fc2(nx.gelu(self.fc1(self.ln2(x))))
        if self.dropout and self.training:
            f = nn.functional.dropout(f, self.dropout)
        x = x + f
        return (x, weights) if keep_attention else (x, None)


class PatchEncoder(nn.Module):
    """Linear patch embedding, learned positional table, encoder stack and heads.

    Inputs are flattened 16x16 patches of shape ``(B, I, 256)``. Separate
    heads serve regression (one scalar in the log10 domain) and the two
    pretraining objectives.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        d = cfg.embed_dim
        self.patch_proj = Linear(PATCH_DIM, d, g)
        self.pos_emb = nn.Parameter(_trunc_normal((cfg.max_patches, d), g))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList([EncoderBlock(cfg, g) for _ in range(cfg.n_layers)])
        self.regression_head = Linear(d, 1, g)
        self.classification_head = Linear(d, d, g)
        self.reconstruction_head = Linear(d, PATCH_DIM, g)

    # -- pieces -------------------------------------------------------------
    def _check_capacity(self, n: int) -> None:
        if n > self.cfg.max_patches:
            raise CapacityError(f"{n} patches exceed max_patches={self.cfg.max_patches}")

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != PATCH_DIM:
            raise CapacityError(f"patches must be flattened to {PATCH_DIM}, got {patches.shape[-1]}")
        self._check_capacity(patches.shape[-2])
        return self.patch_proj(patches)

    def add_positional(self, e: torch.Tensor) -> torch.Tensor:
        n = e.shape[-2]
        self._check_capacity(n)
        return e + self.pos_emb[:n]

    def encode(self, x: torch.Tensor, keep_attention: bool = False):
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        attn: List[torch.Tensor] = []
        for i, block in enumerate(self.blocks):
            x, w = block(x, keep_attention)
            if not bool(torch.isfinite(x).all()):
                raise NumericError(f"non-finite activations after encoder layer {i}")
            if keep_attention:
                attn.append(w)
        if squeeze:
            x = x[0]
        return (x, attn) if keep_attention else x

    @staticmethod
    def mean_pool(o: torch.Tensor) -> torch.Tensor:
        return o.mean(dim=-2)

    def regress(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.regression_head(pooled)[..., 0]

    # -- full passes ----------------------------------------------------------
    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """Regression output in the log10 domain, one value per clip."""
        x = self.add_positional(self.embed_patches(patches))
        return self.regress(self.mean_pool(self.encode(x)))

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def encoder_parameter_names(self) -> List[str]:
        heads = ("classification_head.", "reconstruction_head.", "regression_head.")
        return [n for n, _ in self.named_parameters() if not n.startswith(heads)]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
