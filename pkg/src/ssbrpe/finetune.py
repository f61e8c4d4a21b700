"""Supervised fine-tuning with online rectangular feature augmentation."""

from __future__ import annotations

import copy
import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import numerics as nx
from .dataset import FINETUNE_SECONDS, round_half_up
from .errors import CompatibilityError, ConfigError, DataError, DomainError
from .features import FeatureConfig, RowStats, extract_features, patchify_batch
from .model import PatchEncoder


@dataclass(frozen=True)
class AugmentConfig:
    sample_fraction: float = 0.25
    n_rects_range: Tuple[int, int] = (1, 4)
    rect_h_range: Tuple[float, float] = (0.05, 0.25)
    rect_w_range: Tuple[float, float] = (0.05, 0.25)
    fill_value: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must lie in [0, 1]")
        for lo, hi in (self.n_rects_range, self.rect_h_range, self.rect_w_range):
            if lo > hi:
                raise ConfigError("augmentation ranges must be non-empty")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 150
    patience: int = 10
    lr: float = 1e-4
    lr_decay: float = 0.5
    weight_decay: float = 1e-4
    batch_size: int = 32
    target: str = "volume"
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.target not in ("volume", "rt60"):
            raise ConfigError(f"unknown target {self.target!r}")


# --- targets ---------------------------------------------------------------

def transform_target(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise DomainError("log10 target transform needs positive values")
    return np.log10(y)


def inverse_transform(x):
    return 10.0 ** np.asarray(x, dtype=np.float64)


# --- augmentation ----------------------------------------------------------

def mask_rectangles(block: np.ndarray, rects: Sequence[Tuple[int, int, int, int]], fill_value: float = 0.0) -> np.ndarray:
    """Set each ``(top, left, height, width)`` rectangle (clamped to the block) to ``fill_value``."""
    out = np.array(block, copy=True)
    f, t = out.shape
    for top, left, h, w in rects:
        top, left = max(0, top), max(0, left)
        out[top:min(f, top + h), left:min(t, left + w)] = fill_value
    return out


def draw_rectangles(shape: Tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator):
    f, t = shape
    k = int(rng.integers(cfg.n_rects_range[0], cfg.n_rects_range[1] + 1))
    rects = []
    for _ in range(k):
        h = min(f, max(1, round_half_up(f * rng.uniform(*cfg.rect_h_range))))
        w = min(t, max(1, round_half_up(t * rng.uniform(*cfg.rect_w_range))))
        top = int(rng.integers(0, f - h + 1))
        left = int(rng.integers(0, t - w + 1))
        rects.append((top, left, h, w))
    return rects


def feature_augment(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Mask random rectangles in ``round(B * sample_fraction)`` randomly chosen blocks.

    Returns ``(augmented, selected)``; unselected blocks are copied unchanged.
    """
    batch = np.asarray(batch)
    if batch.ndim != 3:
        raise DataError(f"expected a (B, F, T) batch, got {batch.shape}")
    b = batch.shape[0]
    n_sel = min(b, round_half_up(b * cfg.sample_fraction))
    out = batch.copy()
    selected = sorted(int(i) for i in rng.choice(b, size=n_sel, replace=False)) if n_sel else []
    for i in selected:
        out[i] = mask_rectangles(batch[i], draw_rectangles(batch.shape[1:], cfg, rng), cfg.fill_value)
    return out, selected


# --- training --------------------------------------------------------------

@dataclass
class LabeledSet:
    features: np.ndarray  # (N, F, T), normalised
    targets: np.ndarray  # linear units

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.features) != len(self.targets):
            raise DataError("features and targets differ in length")

    def __len__(self):
        return len(self.targets)


def _batch_loss(model: PatchEncoder, feats: np.ndarray, log_targets: np.ndarray) -> torch.Tensor:
    patches, _ = patchify_batch(feats, "finetune")
    pred = model(torch.from_numpy(patches))
    return nx.mse(pred, torch.as_tensor(log_targets, dtype=torch.float32))


def finetune_epoch(model: PatchEncoder, optimizer: nx.Adam, data: LabeledSet, cfg: TrainConfig,
                   aug: Optional[AugmentConfig], rng: np.random.Generator) -> float:
    """One pass over ``data`` in random order; returns the sample-weighted mean train MSE (log10 domain)."""
    if len(data) == 0:
        raise DataError("empty training split")
    model.train()
    y = transform_target(data.targets)
    order = rng.permutation(len(data))
    total, count = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        feats = data.features[idx]
        if aug is not None and cfg.augment:
            feats, _ = feature_augment(feats, aug, rng)
        optimizer.zero_grad()
        loss = _batch_loss(model, feats, y[idx])
        nx.backward(loss)
        optimizer.step()
        total += loss.detach().item() * len(idx)
        count += len(idx)
    return total / count


@torch.no_grad()
def predict_log(model: PatchEncoder, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(features), batch_size):
        patches, _ = patchify_batch(np.asarray(features[start:start + batch_size], dtype=np.float32), "finetune")
        out.append(model(torch.from_numpy(patches)).numpy().astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def validation_mse(model: PatchEncoder, data: LabeledSet, batch_size: int = 32) -> float:
    """Log10-domain MSE without augmentation, dropout off."""
    if len(data) == 0:
        raise DataError("empty validation split")
    d = predict_log(model, data.features, batch_size) - transform_target(data.targets)
    return float(np.mean(d * d))


class EarlyStopping:
    """Tracks the best validation loss, halves lr on plateaus, signals the stop."""

    def __init__(self, patience: int = 10, lr_decay: float = 0.5):
        self.patience = patience
        self.lr_decay = lr_decay
        self.decay_every = max(1, patience // 2)
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val: float) -> Tuple[bool, bool, bool]:
        """Record one epoch; returns ``(improved, decay_lr, stop)``."""
        if val < self.best:
            self.best, self.best_epoch, self.bad_epochs = val, epoch, 0
            return True, False, False
        self.bad_epochs += 1
        stop = self.bad_epochs >= self.patience
        decay = not stop and self.bad_epochs % self.decay_every == 0
        return False, decay, stop


@dataclass
class TrainResult:
    best_epoch: int
    best_val: float
    history: List[dict] = field(default_factory=list)
    best_state: dict = field(default_factory=dict)
    stopped_early: bool = False


def make_optimizer(model: PatchEncoder, cfg: TrainConfig) -> nx.Adam:
    return nx.Adam(dict(model.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_with_early_stopping(model: PatchEncoder, train: LabeledSet, val: LabeledSet, cfg: TrainConfig,
                              aug: Optional[AugmentConfig] = AugmentConfig(), rng: Optional[np.random.Generator] = None,
                              optimizer: Optional[nx.Adam] = None, history_path=None,
                              epoch_fn: Callable = finetune_epoch, val_fn: Callable = validation_mse) -> TrainResult:
    """Train until ``patience`` consecutive epochs fail to improve val MSE, or ``max_epochs``.

    The model is left holding the weights of the best epoch (epochs count
    from 1).
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and validation splits must be non-empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    optimizer = optimizer if optimizer is not None else make_optimizer(model, cfg)
    stopper = EarlyStopping(cfg.patience, cfg.lr_decay)
    result = TrainResult(0, float("inf"))
    lr = cfg.lr
    optimizer.set_lr(lr)
    for epoch in range(1, cfg.max_epochs + 1):
        train_mse = epoch_fn(model, optimizer, train, cfg, aug, rng)
        val_mse = val_fn(model, val)
        result.history.append({"epoch": epoch, "train_mse": float(train_mse), "val_mse": float(val_mse), "lr": lr})
        improved, decay, stop = stopper.update(epoch, val_mse)
        if improved:
            result.best_state = copy.deepcopy(model.state_dict())
            result.best_epoch, result.best_val = epoch, float(val_mse)
        if decay:
            lr *= cfg.lr_decay
            optimizer.set_lr(lr)
        if stop:
            result.stopped_early = True
            break
    if result.best_state:
        model.load_state_dict(result.best_state)
    if history_path is not None:
        write_history(history_path, result.history)
    return result


def write_history(path, history: Sequence[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_mse"]), repr(h["val_mse"]), repr(h["lr"])])


# --- inference -------------------------------------------------------------

def fit_crop(samples: np.ndarray, seconds: float = FINETUNE_SECONDS, fs: int = 16000) -> np.ndarray:
    n = int(round(seconds * fs))
    x = np.asarray(samples, dtype=np.float64)[:n]
    return np.pad(x, (0, n - len(x))) if len(x) < n else x


def predict(model: PatchEncoder, samples: np.ndarray, feature_cfg: FeatureConfig, stats: Optional[RowStats],
            expected_fingerprint: Optional[str] = None, seconds: float = FINETUNE_SECONDS) -> float:
    """Linear-scale estimate (m^3 or s) for one 16 kHz clip, cropped/padded to the training length."""
    if expected_fingerprint is not None and expected_fingerprint != feature_cfg.fingerprint():
        raise CompatibilityError(
            f"feature config mismatch: checkpoint {expected_fingerprint} vs extractor {feature_cfg.fingerprint()}")
    block = extract_features(fit_crop(samples, seconds, feature_cfg.sample_rate), feature_cfg, stats)
    return float(inverse_transform(predict_log(model, block.values[None])[0]))
