"""Corpus synthesis and feature loading shared by the CLI and experiments."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import (FINETUNE_SECONDS, PRETRAIN_SECONDS, AudioClip, ManifestEntry, SplitSpec, build_manifest,
                      list_wavs, load_clip, pretrain_clip, read_manifest, resolve_clip, standardize_pretrain_clip,
                      synth_speech, write_manifest, write_wav, read_wav)
from .features import FeatureConfig, RowStats, SIGMA_FLOOR, extract_features
from .rir import RirRecord, RoomSamplingConfig, labeled_rir, sample_room

log = logging.getLogger(__name__)


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Ordered map; results never depend on the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def synth_rirs(n_rooms: int, seed: int, sampling: RoomSamplingConfig = RoomSamplingConfig(),
               prefix: str = "room", threads: int = 1, max_order: Optional[int] = None) -> List[RirRecord]:
    """Sample ``n_rooms`` shoebox rooms and render labelled RIRs (RT60 from the Schroeder fit)."""

    def one(i: int) -> RirRecord:
        rng = np.random.default_rng([seed, i])
        room, src, rcv = sample_room(rng, sampling)
        return labeled_rir(room, src, rcv, f"{prefix}{i:04d}", max_order=max_order)

    return parallel_map(one, list(range(n_rooms)), threads)


def synth_speech_corpus(n: int, seed: int, seconds: float = FINETUNE_SECONDS + 0.5) -> List[AudioClip]:
    return [synth_speech(np.random.default_rng([seed, 7, i]), seconds) for i in range(n)]


def load_speech_dir(directory, seconds: Optional[float] = None) -> List[AudioClip]:
    clips = []
    for p in list_wavs(directory):
        data, sr = read_wav(p)
        clip = standardize_pretrain_clip(data, sr, seconds if seconds else len(data) / sr)
        clips.append(clip)
    return clips


@dataclass
class SynthSummary:
    entries: List[ManifestEntry]
    rirs: List[RirRecord]
    pretrain_paths: List[Path]


def synth_dataset(workdir, n_rooms: int, clips_per_room: int, seed: int = 0, keep_fraction: float = 1.0,
                  fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1), snr_range=(0.0, 30.0),
                  speech: Optional[Sequence[AudioClip]] = None, n_speech: int = 32, pretrain_clips: int = 0,
                  pretrain_rooms: int = 20, sampling: RoomSamplingConfig = RoomSamplingConfig(),
                  threads: int = 1, max_order: Optional[int] = None, write_rirs: bool = True) -> SynthSummary:
    """Render a labelled corpus (plus optional unlabeled pretraining clips) under ``workdir``."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log.info("rendering %d room impulse responses", n_rooms)
    rirs = synth_rirs(n_rooms, seed, sampling, "room", threads, max_order)
    if write_rirs:
        for r in rirs:
            write_wav(workdir / "rirs" / f"{r.room_id}.wav", AudioClip(r.samples, r.sample_rate))
    if speech is None:
        speech = synth_speech_corpus(n_speech, seed)
    entries = build_manifest(rirs, speech, workdir, clips_per_room, snr_range,
                             SplitSpec(tuple(fractions), keep_fraction, seed), seed=seed)
    write_manifest(workdir / "manifest.jsonl", entries)

    pretrain_paths = []
    if pretrain_clips:
        log.info("rendering %d unlabeled pretraining clips", pretrain_clips)
        pre_rirs = synth_rirs(pretrain_rooms, seed + 1_000_003, sampling, "pre", threads, max_order)

        def one(i: int) -> Path:
            clip = pretrain_clip(np.random.default_rng([seed, 11, i]), pre_rirs)
            path = workdir / "pretrain" / f"clip{i:05d}.wav"
            write_wav(path, clip)
            return path

        pretrain_paths = parallel_map(one, list(range(pretrain_clips)), threads)
    return SynthSummary(entries, rirs, pretrain_paths)


# --- features --------------------------------------------------------------

def raw_features(samples_list: Sequence[np.ndarray], cfg: FeatureConfig, threads: int = 1) -> np.ndarray:
    """Unnormalised ``(N, F, T)`` blocks for equal-length clips."""
    blocks = parallel_map(lambda s: extract_features(s, cfg).values, list(samples_list), threads)
    return np.stack(blocks).astype(np.float32)


def fit_stats(raw: np.ndarray, cfg: FeatureConfig) -> RowStats:
    g = raw[:, : cfg.n_gammatone, :].astype(np.float64)
    return RowStats(g.mean(axis=(0, 2)), g.std(axis=(0, 2)))


def normalize(raw: np.ndarray, stats: RowStats, cfg: FeatureConfig) -> np.ndarray:
    out = raw.astype(np.float64)
    g = slice(0, cfg.n_gammatone)
    out[:, g, :] = (out[:, g, :] - stats.mean[None, :, None]) / np.maximum(stats.std, SIGMA_FLOOR)[None, :, None]
    return out.astype(np.float32)


def manifest_features(manifest_path, cfg: FeatureConfig, threads: int = 1,
                      entries: Optional[List[ManifestEntry]] = None, seconds: float = FINETUNE_SECONDS):
    """Raw feature blocks for every manifest entry, cropped/padded to ``seconds``."""
    from .finetune import fit_crop

    entries = entries if entries is not None else read_manifest(manifest_path)
    samples = [fit_crop(load_clip(resolve_clip(manifest_path, e)).samples, seconds, cfg.sample_rate)
               for e in entries]
    return raw_features(samples, cfg, threads), entries


def pretrain_features(paths: Iterable, cfg: FeatureConfig, threads: int = 1,
                      seconds: float = PRETRAIN_SECONDS) -> np.ndarray:
    clips = []
    for p in paths:
        data, sr = read_wav(p)
        clips.append(standardize_pretrain_clip(data, sr, seconds).samples)
    return raw_features(clips, cfg, threads)


def split_arrays(raw: np.ndarray, entries: Sequence[ManifestEntry], split: str, target: str):
    idx = [i for i, e in enumerate(entries) if e.split == split]
    y = np.array([(e.volume_m3 if target == "volume" else e.rt60_s) for e in entries], dtype=np.float64)
    return raw[idx], y[idx]
