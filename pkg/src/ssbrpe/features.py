"""Gammatone + low-frequency phase feature blocks and 16x16 patch grids."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .errors import DataError, DimensionError

PATCH = 16
STRIDES = {"pretrain": 16, "finetune": 10, "inference": 10}
LOG_EPS = 1e-10
SIGMA_FLOOR = 1e-6
SSBF_MAGIC = b"SSBF"
SSBF_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_gammatone: int = 64
    fmin_hz: float = 50.0
    fmax_hz: float = 8000.0
    frame_len_s: float = 0.025
    hop_s: float = 0.010
    nfft: int = 1024
    phase_max_hz: float = 500.0

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_len_s * self.sample_rate))

    @property
    def hop(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def n_phase(self) -> int:
        return int(math.floor(self.phase_max_hz / (self.sample_rate / self.nfft))) + 1

    @property
    def n_rows(self) -> int:
        return self.n_gammatone + self.n_phase

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.hop + 1

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- ERB scale and gammatone filterbank ------------------------------------

def erb_rate(f):
    return 21.4 * np.log10(0.00437 * np.asarray(f, dtype=np.float64) + 1.0)


def inverse_erb_rate(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(f):
    return 24.7 * (4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


def erb_center_frequencies(n: int, fmin_hz: float, fmax_hz: float, sample_rate: int = 16000) -> np.ndarray:
    """``n`` centre frequencies equally spaced on the ERB-rate scale, endpoints included."""
    if n < 2:
        raise ValueError("need at least two gammatone channels")
    if not 0 < fmin_hz < fmax_hz <= sample_rate / 2:
        raise ValueError(f"need 0 < fmin < fmax <= fs/2, got ({fmin_hz}, {fmax_hz})")
    cf = inverse_erb_rate(np.linspace(erb_rate(fmin_hz), erb_rate(fmax_hz), n))
    cf[0], cf[-1] = fmin_hz, fmax_hz
    return cf


def gammatone_sos(cf: float, fs: int, order: int = 4) -> np.ndarray:
    """All-pole gammatone approximation as ``order`` identical resonator sections.

    Pole radius follows the 1.019 ERB bandwidth. The pole angle is chosen so
    the resonator peak sits exactly on ``cf`` (a two-pole peak lies at
    cos(w) = (1 + r^2) / (2 r) cos(theta)), and gain there is unity.
    """
    r = math.exp(-2.0 * math.pi * 1.019 * float(erb_bandwidth(cf)) / fs)
    w_c = 2.0 * math.pi * cf / fs
    cos_theta = 2.0 * r * math.cos(w_c) / (1.0 + r * r)
    a1, a2 = -2.0 * r * cos_theta, r * r
    z = np.exp(-1j * w_c)
    g = abs(1.0 + a1 * z + a2 * z * z)
    section = [g, 0.0, 0.0, 1.0, a1, a2]
    return np.array([section] * order, dtype=np.float64)


def _frame_energy(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    frames = sliding_window_view(x, frame_len, axis=-1)[..., ::hop, :]
    return np.mean(frames * frames, axis=-1)


def gammatone_spectrogram(samples: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log10 frame energy of each gammatone channel, shape ``(n_gammatone, T)``."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < cfg.frame_len:
        raise DataError(f"clip of {len(x)} samples is shorter than one frame ({cfg.frame_len})")
    cfs = erb_center_frequencies(cfg.n_gammatone, cfg.fmin_hz, cfg.fmax_hz, cfg.sample_rate)
    out = np.empty((cfg.n_gammatone, cfg.n_frames(len(x))))
    for k, cf in enumerate(cfs):
        y = signal.sosfilt(gammatone_sos(cf, cfg.sample_rate), x)
        out[k] = np.log10(_frame_energy(y, cfg.frame_len, cfg.hop) + LOG_EPS)
    return out


def lowfreq_phase_spectrogram(samples: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """STFT phase (radians) of bins up to ``phase_max_hz``, shape ``(n_phase, T)``.

    Each Hann window of ``nfft`` samples is centred on the matching
    gammatone frame, so both branches produce the same frame count.
    """
    if abs(cfg.hop_s * cfg.sample_rate - cfg.hop) > 1e-9 or abs(cfg.frame_len_s * cfg.sample_rate - cfg.frame_len) > 1e-9:
        raise DataError("hop/frame length must be whole sample counts to align with gammatone framing")
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < cfg.frame_len:
        raise DataError(f"clip of {len(x)} samples is shorter than one frame ({cfg.frame_len})")
    n_frames = cfg.n_frames(len(x))
    lead = cfg.nfft // 2 - cfg.frame_len // 2
    padded = np.concatenate([np.zeros(lead), x, np.zeros(cfg.nfft)])
    frames = sliding_window_view(padded, cfg.nfft)[::cfg.hop][:n_frames]
    spec = np.fft.rfft(frames * signal.get_window("hann", cfg.nfft), axis=-1)[:, : cfg.n_phase]
    phase = np.angle(spec).T
    if phase.shape[1] != n_frames:
        raise DataError("phase framing does not match gammatone framing")
    return phase


# --- feature blocks --------------------------------------------------------

@dataclass
class RowStats:
    """Per-row mean/std of gammatone rows, fitted on a training set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, gammas: Sequence[np.ndarray]) -> "RowStats":
        stacked = np.concatenate([np.asarray(g, dtype=np.float64) for g in gammas], axis=1)
        return cls(stacked.mean(axis=1), stacked.std(axis=1))

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "RowStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class FeatureBlock:
    values: np.ndarray
    row_map: List[dict]
    frame_hop_s: float
    frame_len_s: float
    sample_rate: int
    n_gamma: int
    n_phase: int
    normalized: bool = False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def build_row_map(cfg: FeatureConfig) -> List[dict]:
    cfs = erb_center_frequencies(cfg.n_gammatone, cfg.fmin_hz, cfg.fmax_hz, cfg.sample_rate)
    rows = [{"kind": "gammatone", "channel": k, "cf_hz": float(cf)} for k, cf in enumerate(cfs)]
    bin_hz = cfg.sample_rate / cfg.nfft
    rows += [{"kind": "phase", "bin": b, "hz": b * bin_hz} for b in range(cfg.n_phase)]
    return rows


def assemble_feature_block(gamma: np.ndarray, phase: np.ndarray, cfg: FeatureConfig = FeatureConfig(),
                           stats: Optional[RowStats] = None) -> FeatureBlock:
    """Stack gammatone rows over phase rows; z-normalise gammatone rows when ``stats`` is given."""
    if gamma.shape[1] != phase.shape[1]:
        raise DataError(f"frame counts differ: gammatone {gamma.shape[1]}, phase {phase.shape[1]}")
    block = FeatureBlock(
        values=np.vstack([gamma, phase]).astype(np.float32),
        row_map=build_row_map(cfg), frame_hop_s=cfg.hop_s, frame_len_s=cfg.frame_len_s,
        sample_rate=cfg.sample_rate, n_gamma=gamma.shape[0], n_phase=phase.shape[0],
    )
    return normalize_block(block, stats) if stats is not None else block


def normalize_block(block: FeatureBlock, stats: RowStats) -> FeatureBlock:
    if block.normalized:
        raise DataError("feature block is already normalised")
    v = block.values.astype(np.float64)
    g = slice(0, block.n_gamma)
    v[g] = (v[g] - stats.mean[:, None]) / np.maximum(stats.std, SIGMA_FLOOR)[:, None]
    return FeatureBlock(v.astype(np.float32), block.row_map, block.frame_hop_s, block.frame_len_s,
                        block.sample_rate, block.n_gamma, block.n_phase, normalized=True)


def extract_features(samples: np.ndarray, cfg: FeatureConfig = FeatureConfig(),
                     stats: Optional[RowStats] = None) -> FeatureBlock:
    return assemble_feature_block(gammatone_spectrogram(samples, cfg), lowfreq_phase_spectrogram(samples, cfg),
                                  cfg, stats)


def write_feature_block(path, block: FeatureBlock) -> None:
    """Little-endian SSBF file plus a ``.rows.json`` sidecar holding the row map."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    f, t = block.values.shape
    head = SSBF_MAGIC + struct.pack("<IIIddII", SSBF_VERSION, f, t, block.frame_hop_s, block.frame_len_s,
                                    block.n_gamma, block.n_phase)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(block.values, dtype="<f4").tobytes())
    sidecar = {"row_map": block.row_map, "sample_rate": block.sample_rate, "normalized": block.normalized}
    path.with_suffix(".rows.json").write_text(json.dumps(sidecar, sort_keys=True))


def read_feature_block(path) -> FeatureBlock:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != SSBF_MAGIC:
        raise DataError(f"{path}: not an SSBF file")
    version, f, t, hop, flen, n_g, n_p = struct.unpack_from("<IIIddII", raw, 4)
    if version != SSBF_VERSION:
        raise DataError(f"{path}: unsupported SSBF version {version}")
    offset = 4 + struct.calcsize("<IIIddII")
    values = np.frombuffer(raw, dtype="<f4", count=f * t, offset=offset).reshape(f, t).astype(np.float32)
    side = json.loads(path.with_suffix(".rows.json").read_text())
    return FeatureBlock(values, side["row_map"], hop, flen, side["sample_rate"], n_g, n_p, side["normalized"])


# --- patches ---------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    stride: int
    rows: int
    cols: int
    pad_f: int
    pad_t: int
    patch: int = PATCH

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def padded_shape(self) -> Tuple[int, int]:
        return ((self.rows - 1) * self.stride + self.patch, (self.cols - 1) * self.stride + self.patch)


@dataclass
class PatchSet:
    patches: np.ndarray  # (I, 256), row-major within each patch
    grid: PatchGrid
    source_shape: Tuple[int, int] = field(default=(0, 0))


def covered_length(n: int, stride: int, patch: int = PATCH) -> int:
    """Smallest length >= max(n, patch) whose windows tile it exactly."""
    n = max(n, patch)
    return patch + math.ceil((n - patch) / stride) * stride


def grid_for(shape: Tuple[int, int], mode: str) -> PatchGrid:
    if mode not in STRIDES:
        raise ValueError(f"unknown patchify mode {mode!r}")
    s = STRIDES[mode]
    f, t = shape
    fp, tp = covered_length(f, s), covered_length(t, s)
    return PatchGrid(s, (fp - PATCH) // s + 1, (tp - PATCH) // s + 1, fp - f, tp - t)


def patchify_batch(values: np.ndarray, mode: str) -> Tuple[np.ndarray, PatchGrid]:
    """``(B, F, T)`` blocks -> ``(B, I, 256)`` patches, frequency-major patch order."""
    if values.ndim != 3:
        raise DimensionError(f"expected (B, F, T), got {values.shape}")
    b, f, t = values.shape
    grid = grid_for((f, t), mode)
    padded = np.pad(values, ((0, 0), (0, grid.pad_f), (0, grid.pad_t)))
    win = sliding_window_view(padded, (PATCH, PATCH), axis=(1, 2))[:, ::grid.stride, ::grid.stride]
    patches = np.ascontiguousarray(win).reshape(b, grid.n_patches, PATCH * PATCH)
    return patches, grid


def patchify(block, mode: str) -> PatchSet:
    values = block.values if isinstance(block, FeatureBlock) else np.asarray(block)
    patches, grid = patchify_batch(values[None], mode)
    return PatchSet(patches[0], grid, tuple(values.shape))


def unpatchify(ps: PatchSet, crop: bool = False) -> np.ndarray:
    """Write patches back onto the padded canvas (later patches win on overlap)."""
    g = ps.grid
    fp, tp = g.padded_shape
    out = np.zeros((fp, tp), dtype=ps.patches.dtype)
    for i, p in enumerate(ps.patches):
        r, c = divmod(i, g.cols)
        out[r * g.stride:r * g.stride + PATCH, c * g.stride:c * g.stride + PATCH] = p.reshape(PATCH, PATCH)
    if crop:
        out = out[: ps.source_shape[0], : ps.source_shape[1]]
    return out
