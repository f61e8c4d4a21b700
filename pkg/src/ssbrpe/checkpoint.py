"""SSBC checkpoint files.

Layout: magic ``SSBC``, u32 version, u32 header length, UTF-8 JSON header,
then float32 little-endian blobs in the order listed under ``tensors``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .errors import CompatibilityError, DataError
from .features import FeatureConfig, RowStats
from .model import ModelConfig, PatchEncoder
from .numerics import Adam

MAGIC = b"SSBC"
VERSION = 1


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], header: dict) -> None:
    names = list(tensors)
    head = dict(header)
    head["tensors"] = [{"name": n, "shape": list(tensors[n].shape)} for n in names]
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            arr = tensors[n].detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Tuple[dict, Dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not an SSBC checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(spec["shape"])
        tensors[spec["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    return header, tensors


def save_model(path, model: PatchEncoder, feature_cfg: FeatureConfig, stats: Optional[RowStats] = None,
               optimizer: Optional[Adam] = None, extra: Optional[dict] = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.named_tensors().items()}
    header = {
        "model_config": model.cfg.to_dict(),
        "feature_config": feature_cfg.to_dict(),
        "feature_fingerprint": feature_cfg.fingerprint(),
        "row_stats": stats.to_dict() if stats is not None else None,
    }
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        header["optimizer"] = optimizer.state_meta()
    if extra:
        header.update(extra)
    save_checkpoint(path, tensors, header)


def load_model(path):
    """Return ``(model, feature_cfg, stats, header, tensors)`` from an SSBC file."""
    header, tensors = load_checkpoint(path)
    cfg = ModelConfig(**header["model_config"])
    model = PatchEncoder(cfg)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    feature_cfg = FeatureConfig(**header["feature_config"])
    stats = RowStats.from_dict(header["row_stats"]) if header.get("row_stats") else None
    return model, feature_cfg, stats, header, tensors


def check_feature_compat(header: dict, feature_cfg: FeatureConfig) -> None:
    ckpt_fp = header.get("feature_fingerprint")
    if ckpt_fp != feature_cfg.fingerprint():
        raise CompatibilityError(
            f"feature config mismatch: checkpoint {ckpt_fp} vs extractor {feature_cfg.fingerprint()}")
