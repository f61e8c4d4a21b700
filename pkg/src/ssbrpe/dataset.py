"""Reverberant-speech corpora, unlabeled pretraining clips and manifests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import DataError
from .rir import SAMPLE_RATE, RirRecord

PRETRAIN_SECONDS = 10.0
FINETUNE_SECONDS = 4.0
PEAK_LEVEL = 0.9
SPLITS = ("train", "val", "test")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DataError(f"AudioClip must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("AudioClip contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ManifestEntry:
    clip_path: str
    room_id: str
    volume_m3: float
    rt60_s: float
    snr_db: float
    split: str
    source_kind: str = "synthetic_rir"

    def __post_init__(self):
        if self.volume_m3 <= 0 or self.rt60_s <= 0:
            raise DataError(f"labels must be positive: {self.volume_m3}, {self.rt60_s}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.source_kind not in ("synthetic_rir", "external_rir"):
            raise DataError(f"unknown source_kind {self.source_kind!r}")


@dataclass(frozen=True)
class SplitSpec:
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    room_type_keep_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9 or any(f < 0 for f in self.fractions):
            raise DataError(f"split fractions must be non-negative and sum to 1, got {self.fractions}")
        if not 0.0 < self.room_type_keep_fraction <= 1.0:
            raise DataError("room_type_keep_fraction must lie in (0, 1]")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# --- WAV I/O ---------------------------------------------------------------

def read_wav(path) -> Tuple[np.ndarray, int]:
    """Read any PCM/float WAV as float array in [-1, 1]; shape (N,) or (N, C)."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32) / float(np.iinfo(data.dtype).max + 1)
    return data.astype(np.float32, copy=False), int(sr)


def write_wav(path, clip: AudioClip) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, np.asarray(clip.samples, dtype=np.float32))


def load_clip(path) -> AudioClip:
    data, sr = read_wav(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    return AudioClip(data, sr)


# --- signal operations -----------------------------------------------------

def peak_normalize(x: np.ndarray, level: float = PEAK_LEVEL) -> np.ndarray:
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak == 0.0:
        return np.asarray(x, dtype=np.float64)
    return np.asarray(x, dtype=np.float64) * (level / peak)


def convolve_speech_rir(speech: AudioClip, rir: RirRecord) -> AudioClip:
    """Full linear convolution (length N + L - 1), peak-normalised to 0.9."""
    if speech.sample_rate != rir.sample_rate:
        raise DataError(f"sample rates differ: speech {speech.sample_rate} Hz, rir {rir.sample_rate} Hz")
    y = signal.fftconvolve(speech.samples.astype(np.float64), np.asarray(rir.samples, dtype=np.float64))
    return AudioClip(peak_normalize(y), speech.sample_rate)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def add_noise(clip: AudioClip, noise_kind: str, snr_db: float, rng: np.random.Generator) -> AudioClip:
    """Add white or pink noise scaled to the requested SNR. ``snr_db=inf`` is a no-op."""
    if math.isinf(snr_db) and snr_db > 0:
        return clip
    if not math.isfinite(snr_db):
        raise DataError(f"snr_db must be finite or +inf, got {snr_db}")
    x = clip.samples.astype(np.float64)
    p_sig = float(np.mean(x * x))
    if p_sig == 0.0:
        raise DataError("cannot set an SNR on a zero-power clip")
    if noise_kind == "white":
        noise = rng.standard_normal(len(x))
    elif noise_kind == "pink":
        noise = pink_noise(len(x), rng)
    else:
        raise DataError(f"unknown noise kind {noise_kind!r}")
    p_noise = float(np.mean(noise * noise))
    noise *= math.sqrt(p_sig / (10.0 ** (snr_db / 10.0)) / p_noise)
    return AudioClip(x + noise, clip.sample_rate)


def resample(x: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    if sr_in == sr_out:
        return x
    ratio = Fraction(sr_out, sr_in)
    return signal.resample_poly(x, ratio.numerator, ratio.denominator, axis=0)


def standardize_pretrain_clip(samples: np.ndarray, sample_rate: int,
                              seconds: float = PRETRAIN_SECONDS) -> AudioClip:
    """Mono mixdown, resample to 16 kHz, then crop or zero-pad to ``seconds``."""
    x = np.asarray(samples)
    if x.size == 0:
        raise DataError("empty input clip")
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = resample(x, sample_rate, SAMPLE_RATE)
    n = int(round(seconds * SAMPLE_RATE))
    if len(x) >= n:
        x = x[:n]
    else:
        x = np.concatenate([x, np.zeros(n - len(x), dtype=x.dtype)])
    return AudioClip(x, SAMPLE_RATE)


def synth_speech(rng: np.random.Generator, seconds: float, fs: int = SAMPLE_RATE) -> AudioClip:
    """Speech-like test signal: syllable-rate modulated, formant-filtered noise with pauses."""
    n = int(round(seconds * fs))
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.2) * fs)
    while pos < n:
        seg_len = int(rng.uniform(0.4, 1.6) * fs)
        seg = rng.standard_normal(seg_len)
        f1 = rng.uniform(300, 900)
        f2 = rng.uniform(900, 2500)
        sos1 = signal.butter(2, [f1 * 0.8, f1 * 1.25], btype="bandpass", fs=fs, output="sos")
        sos2 = signal.butter(2, [f2 * 0.8, f2 * 1.25], btype="bandpass", fs=fs, output="sos")
        voiced = signal.sosfilt(sos1, seg) + 0.5 * signal.sosfilt(sos2, seg)
        t = np.arange(seg_len) / fs
        syll = rng.uniform(3.0, 6.0)
        env = np.maximum(np.sin(2 * np.pi * syll * t + rng.uniform(0, np.pi)), 0.0) ** 2
        env *= np.hanning(seg_len)
        piece = voiced * env
        end = min(n, pos + seg_len)
        out[pos:end] += piece[: end - pos]
        pos = end + int(rng.uniform(0.1, 0.5) * fs)
    return AudioClip(peak_normalize(out), fs)


# --- manifests -------------------------------------------------------------

def assign_splits(room_ids: Sequence[str], spec: SplitSpec) -> Dict[str, List[str]]:
    """Partition rooms into train/val/test, then subsample training rooms.

    Only training rooms are subsampled by ``room_type_keep_fraction``; the
    validation and test sets are unaffected.
    """
    n = len(room_ids)
    needed = sum(1 for f in spec.fractions if f > 0)
    if n < needed:
        raise DataError(f"{n} rooms cannot fill {needed} non-empty splits")
    rng = np.random.default_rng(spec.seed)
    order = [room_ids[i] for i in rng.permutation(n)]
    n_val = max(1, round_half_up(n * spec.fractions[1])) if spec.fractions[1] > 0 else 0
    n_test = max(1, round_half_up(n * spec.fractions[2])) if spec.fractions[2] > 0 else 0
    n_train = n - n_val - n_test
    if spec.fractions[0] > 0 and n_train < 1:
        raise DataError("no rooms left for training")
    splits = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    if spec.room_type_keep_fraction < 1.0:
        keep = max(1, round_half_up(n_train * spec.room_type_keep_fraction))
        picked = sorted(rng.choice(n_train, size=keep, replace=False))
        splits["train"] = [splits["train"][i] for i in picked]
    return splits


def crop_after_onset(y: np.ndarray, onset: int, n_out: int, rng: np.random.Generator,
                     slack: int) -> np.ndarray:
    start = onset + (int(rng.integers(0, slack + 1)) if slack > 0 else 0)
    seg = y[start:start + n_out]
    if len(seg) < n_out:
        seg = np.concatenate([seg, np.zeros(n_out - len(seg))])
    return seg


def render_labeled_clip(speech: AudioClip, rir: RirRecord, snr_db: float, noise_kind: str,
                        rng: np.random.Generator, seconds: float = FINETUNE_SECONDS) -> AudioClip:
    """Convolve, crop a fixed-length window after the direct sound, add noise, bound the peak."""
    wet = convolve_speech_rir(speech, rir)
    n_out = int(round(seconds * speech.sample_rate))
    onset = int(math.floor(rir.direct_delay_samples))
    slack = max(0, len(speech.samples) - n_out)
    seg = crop_after_onset(wet.samples.astype(np.float64), onset, n_out, rng, slack)
    noisy = add_noise(AudioClip(seg, speech.sample_rate), noise_kind, snr_db, rng)
    y = noisy.samples.astype(np.float64)
    if np.max(np.abs(y)) > 1.0:
        y = peak_normalize(y)
    return AudioClip(y, speech.sample_rate)


def build_manifest(rirs: Sequence[RirRecord], speech: Sequence[AudioClip], out_dir, per_room_clips: int,
                   snr_range: Tuple[float, float] = (0.0, 30.0), split_spec: SplitSpec = SplitSpec(),
                   noise_kinds: Sequence[str] = ("white", "pink"), seed: int = 0,
                   seconds: float = FINETUNE_SECONDS, source_kind: str = "synthetic_rir",
                   clip_dir: str = "clips") -> List[ManifestEntry]:
    """Render ``per_room_clips`` noisy reverberant clips per room and assign splits by room.

    Clips are written under ``out_dir/clip_dir``; returned entries carry paths
    relative to ``out_dir``. Rooms dropped by the limited-data protocol emit
    no clips.
    """
    if not speech:
        raise DataError("speech corpus is empty")
    out_dir = Path(out_dir)
    by_room = {r.room_id: r for r in rirs}
    if len(by_room) != len(rirs):
        raise DataError("duplicate room_id in RIR set")
    splits = assign_splits([r.room_id for r in rirs], split_spec)
    room_split = {rid: s for s, ids in splits.items() for rid in ids}
    entries = []
    for idx, rir in enumerate(rirs):
        split = room_split.get(rir.room_id)
        if split is None:
            continue
        rng = np.random.default_rng([seed, idx])
        for k in range(per_room_clips):
            sp = speech[int(rng.integers(len(speech)))]
            snr = float(rng.uniform(*snr_range))
            kind = noise_kinds[int(rng.integers(len(noise_kinds)))]
            clip = render_labeled_clip(sp, rir, snr, kind, rng, seconds)
            rel = f"{clip_dir}/{rir.room_id}_{k:03d}.wav"
            write_wav(out_dir / rel, clip)
            entries.append(ManifestEntry(rel, rir.room_id, float(rir.volume_m3), float(rir.rt60_s),
                                         snr, split, source_kind))
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(json.dumps(asdict(e), ensure_ascii=False) + "\n")


def read_manifest(path) -> List[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest line ({exc})") from None
    return entries


def resolve_clip(manifest_path, entry: ManifestEntry) -> Path:
    p = Path(entry.clip_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def check_no_leakage(entries: Sequence[ManifestEntry]) -> None:
    seen: Dict[str, str] = {}
    for e in entries:
        if seen.setdefault(e.room_id, e.split) != e.split:
            raise DataError(f"room {e.room_id} appears in splits {seen[e.room_id]} and {e.split}")


def list_wavs(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise DataError(f"no WAV files in {d}")
    return files


def pretrain_clip(rng: np.random.Generator, rirs: Sequence[RirRecord], dry_fraction: float = 0.2,
                  seconds: float = PRETRAIN_SECONDS) -> AudioClip:
    """One unlabeled 10 s clip: speech-like signal, reverberant unless drawn dry, plus noise."""
    speech = synth_speech(rng, seconds)
    if rirs and rng.uniform() >= dry_fraction:
        rir = rirs[int(rng.integers(len(rirs)))]
        speech = convolve_speech_rir(speech, rir)
    snr = float(rng.uniform(0.0, 30.0))
    kind = ("white", "pink")[int(rng.integers(2))]
    noisy = add_noise(speech, kind, snr, rng)
    return standardize_pretrain_clip(peak_normalize(noisy.samples.astype(np.float64)), SAMPLE_RATE, seconds)

