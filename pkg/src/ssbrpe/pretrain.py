"""Masked spectrogram patch pretraining.

Masked patches are replaced by a learned token before positional
embeddings are added. Encoder outputs at masked positions feed two heads:
a classification head scored with InfoNCE against the (constant) patch
embeddings of the masked positions, and a reconstruction head scored with
MSE against the raw patch values. The total loss is ``l_d + lam * l_g``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import numerics as nx
from .checkpoint import load_model, save_model
from .errors import ConfigError, DataError, DimensionError
from .features import STRIDES, FeatureConfig, RowStats, patchify_batch
from .model import PatchEncoder


@dataclass(frozen=True)
class PretrainConfig:
    lam: float = 10.0
    mask_fraction: float = 0.5
    batch_size: int = 4
    steps: int = 1000
    lr: float = 1e-4
    weight_decay: float = 0.0
    warmup_steps: int = 0
    schedule: str = "constant"  # or "cosine"
    negatives: str = "masked_only"  # or "all_patches"
    temperature: float = 1.0
    mask_mode: str = "token"  # or "zero"
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must lie in (0, 1)")
        if self.negatives not in ("masked_only", "all_patches"):
            raise ConfigError(f"unknown negatives mode {self.negatives!r}")
        if self.mask_mode not in ("token", "zero"):
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.temperature <= 0 or self.batch_size < 1:
            raise ConfigError("temperature must be > 0 and batch_size >= 1")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "cosine" and self.steps > self.warmup_steps:
            frac = (step - self.warmup_steps) / (self.steps - self.warmup_steps)
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
        return self.lr


@dataclass
class MaskPlan:
    masked_indices: List[int]
    n_patches: int

    @property
    def mask_count(self) -> int:
        return len(self.masked_indices)

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.n_patches, dtype=bool)
        m[self.masked_indices] = True
        return m


@dataclass
class LossBreakdown:
    l_d: torch.Tensor
    l_g: torch.Tensor
    l_total: torch.Tensor

    def floats(self):
        return self.l_d.detach().item(), self.l_g.detach().item(), self.l_total.detach().item()


def mask_count(n_patches: int, mask_fraction: float) -> int:
    return min(max(int(math.floor(n_patches * mask_fraction + 0.5)), 1), n_patches - 1)


def sample_mask(n_patches: int, mask_fraction: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly choose ``round(I * fraction)`` patches (clamped to [1, I-1]) without replacement."""
    if n_patches < 2:
        raise DataError("masking needs at least two patches")
    idx = rng.choice(n_patches, size=mask_count(n_patches, mask_fraction), replace=False)
    return MaskPlan(sorted(int(i) for i in idx), n_patches)


def apply_mask(e: torch.Tensor, mask, mask_token: torch.Tensor) -> torch.Tensor:
    """Replace masked rows of ``e`` (``(I, d)`` or ``(B, I, d)``) by ``mask_token``."""
    if isinstance(mask, MaskPlan):
        if mask.masked_indices and not 0 <= min(mask.masked_indices) <= max(mask.masked_indices) < e.shape[-2]:
            raise DataError("mask index out of range")
        if mask.n_patches != e.shape[-2]:
            raise DataError(f"mask plan is for {mask.n_patches} patches, embeddings have {e.shape[-2]}")
        mask = mask.as_bool()
    m = torch.as_tensor(mask, dtype=torch.bool)
    if m.shape != e.shape[:-1]:
        raise DataError(f"mask shape {tuple(m.shape)} does not match embeddings {tuple(e.shape[:-1])}")
    return torch.where(m[..., None], mask_token.to(e.dtype), e)


def infonce_loss(class_out: torch.Tensor, targets: torch.Tensor, temperature: float = 1.0,
                 positives: Optional[torch.Tensor] = None) -> torch.Tensor:
    """InfoNCE over dot-product similarities.

    Query ``i`` scores every row of ``targets``; its positive is row
    ``positives[i]`` (row ``i`` when ``positives`` is omitted).
    """
    m = class_out.shape[0]
    if m < 2:
        raise DataError("InfoNCE needs at least two masked patches (no negatives otherwise)")
    if class_out.shape[-1] != targets.shape[-1]:
        raise DimensionError("query and target widths differ")
    if positives is None:
        if targets.shape[0] != m:
            raise DimensionError("targets must align with queries when positives are implicit")
        positives = torch.arange(m)
    logits = nx.matmul(class_out, targets.transpose(0, 1)) / temperature
    log_p = torch.log_softmax(logits.to(torch.float64), dim=-1)
    return (-log_p[torch.arange(m), positives].mean()).to(class_out.dtype)


def reconstruction_mse(recon_out: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    return nx.mse(recon_out, original)


def joint_loss(l_d: torch.Tensor, l_g: torch.Tensor, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    return LossBreakdown(l_d, l_g, l_d + lam * l_g)


def pretrain_losses(model: PatchEncoder, patches: torch.Tensor, masks: torch.Tensor,
                    cfg: PretrainConfig, targets: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Forward one batch of ``(B, I, 256)`` patches under boolean ``(B, I)`` masks.

    InfoNCE targets are the detached patch embeddings. Passing ``targets``
    pins them explicitly, which lets a finite-difference check hold them
    fixed the same way the gradient does.
    """
    e = model.embed_patches(patches)
    targets = e.detach() if targets is None else targets.to(e.dtype)
    token = model.mask_token if cfg.mask_mode == "token" else torch.zeros_like(model.mask_token)
    x = apply_mask(e, masks, token)
    o = model.encode(model.add_positional(x))
    picked = o[masks]
    c = model.classification_head(picked)
    r = model.reconstruction_head(picked)
    if cfg.negatives == "masked_only":
        l_d = infonce_loss(c, targets[masks], cfg.temperature)
    else:
        flat = masks.reshape(-1).nonzero()[:, 0]
        l_d = infonce_loss(c, targets.reshape(-1, targets.shape[-1]), cfg.temperature, positives=flat)
    l_g = reconstruction_mse(r, patches[masks])
    return joint_loss(l_d, l_g, cfg.lam)


@dataclass
class PretrainState:
    step: int
    rng: np.random.Generator
    order: List[int] = field(default_factory=list)

    def next_batch(self, n_items: int, batch_size: int) -> List[int]:
        while len(self.order) < batch_size:
            self.order.extend(int(i) for i in self.rng.permutation(n_items))
        batch, self.order = self.order[:batch_size], self.order[batch_size:]
        return batch

    def to_dict(self) -> dict:
        return {"step": self.step, "rng_state": self.rng.bit_generator.state, "order": list(self.order)}

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainState":
        rng = np.random.default_rng()
        rng.bit_generator.state = d["rng_state"]
        return cls(int(d["step"]), rng, [int(i) for i in d["order"]])


TRACE_HEADER = ["step", "l_d", "l_g", "l_total", "lr"]


def make_optimizer(model: PatchEncoder, lr: float, weight_decay: float) -> nx.Adam:
    return nx.Adam(dict(model.named_parameters()), lr=lr, weight_decay=weight_decay)


def pretrain_loop(corpus: np.ndarray, model: PatchEncoder, cfg: PretrainConfig,
                  optimizer: Optional[nx.Adam] = None, state: Optional[PretrainState] = None,
                  trace_path=None, checkpoint_path=None, feature_cfg: FeatureConfig = FeatureConfig(),
                  stats: Optional[RowStats] = None, extra_header: Optional[dict] = None):
    """Run ``cfg.steps`` optimisation steps over ``(N, F, T)`` unlabeled feature blocks.

    Returns ``(trace, state, optimizer)``. The trace holds one row per step;
    when ``trace_path`` is given rows are appended there as CSV. A checkpoint
    (model, Adam moments, RNG and batch-order state) is written every
    ``checkpoint_every`` steps and at the end when ``checkpoint_path`` is set.
    """
    corpus = np.asarray(corpus, dtype=np.float32)
    if corpus.ndim != 3 or corpus.shape[0] == 0:
        raise DataError("pretraining corpus is empty")
    _, grid = patchify_batch(corpus[:1], "pretrain")
    assert grid.stride == STRIDES["pretrain"] == 16, "pretraining must use non-overlapping patches"
    if optimizer is None:
        optimizer = make_optimizer(model, cfg.lr, cfg.weight_decay)
    if state is None:
        state = PretrainState(0, np.random.default_rng(cfg.seed))

    trace = []
    writer = fh = None
    if trace_path is not None:
        trace_path = Path(trace_path)
        fresh = not trace_path.exists() or state.step == 0
        fh = open(trace_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(TRACE_HEADER)

    def checkpoint():
        if checkpoint_path is not None:
            extra = {"pretrain_config": asdict(cfg), "pretrain_state": state.to_dict(), **(extra_header or {})}
            save_model(checkpoint_path, model, feature_cfg, stats, optimizer, extra)

    model.train()
    try:
        for _ in range(cfg.steps):
            idx = state.next_batch(len(corpus), cfg.batch_size)
            patches, grid = patchify_batch(corpus[idx], "pretrain")
            masks = np.stack([sample_mask(grid.n_patches, cfg.mask_fraction, state.rng).as_bool()
                              for _ in idx])
            lr = cfg.lr_at(state.step)
            optimizer.set_lr(lr)
            optimizer.zero_grad()
            losses = pretrain_losses(model, torch.from_numpy(patches), torch.from_numpy(masks), cfg)
            nx.backward(losses.l_total)
            optimizer.step()
            l_d, l_g, l_total = losses.floats()
            row = {"step": state.step, "l_d": l_d, "l_g": l_g, "l_total": l_total, "lr": lr}
            trace.append(row)
            if writer is not None:
                writer.writerow([state.step, repr(l_d), repr(l_g), repr(l_total), repr(lr)])
            state.step += 1
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                checkpoint()
    finally:
        if fh is not None:
            fh.close()
    checkpoint()
    return trace, state, optimizer


def resume(checkpoint_path):
    """Rebuild ``(model, cfg, optimizer, state, feature_cfg, stats)`` from a pretraining checkpoint."""
    model, feature_cfg, stats, header, tensors = load_model(checkpoint_path)
    if "pretrain_state" not in header:
        raise DataError(f"{checkpoint_path} is not a pretraining checkpoint")
    cfg = PretrainConfig(**header["pretrain_config"])
    optimizer = make_optimizer(model, cfg.lr, cfg.weight_decay)
    optimizer.load_state(header["optimizer"], tensors)
    state = PretrainState.from_dict(header["pretrain_state"])
    return model, cfg, optimizer, state, feature_cfg, stats


def read_trace(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
