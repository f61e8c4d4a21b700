"""Toy-scale comparison of initialisations and augmentation.

Builds one synthetic corpus, then for each seed pretrains an encoder and
fine-tunes three variants: random init, pretrained init, and pretrained
init with feature augmentation. Test log-MSE per variant is reported.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .features import FeatureConfig
from .finetune import AugmentConfig, LabeledSet, TrainConfig, train_with_early_stopping, transform_target, validation_mse
from .model import ModelConfig, PatchEncoder
from .pipeline import fit_stats, manifest_features, normalize, pretrain_features, split_arrays, synth_dataset
from .pretrain import PretrainConfig, pretrain_loop

log = logging.getLogger(__name__)

VARIANTS = ("random", "pretrained", "pretrained_aug")


@dataclass
class ToySetup:
    n_rooms: int = 200
    clips_per_room: int = 2
    pretrain_clips: int = 500
    pretrain_rooms: int = 40
    corpus_seed: int = 1234
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    target: str = "volume"
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(steps=2000, batch_size=4, lr=5e-4,
                                                                           warmup_steps=100))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=60, patience=10, lr=3e-4,
                                                                  batch_size=16, weight_decay=1e-4))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    threads: int = 1


@dataclass
class ToyCorpus:
    pretrain: np.ndarray
    sets: Dict[str, LabeledSet]
    stats_source: str = "pretrain"


def build_corpus(workdir, setup: ToySetup, feature_cfg: FeatureConfig = FeatureConfig()) -> ToyCorpus:
    """Render the corpus once and return normalised arrays.

    Normalisation statistics come from the unlabeled pretraining clips and
    are shared by every variant, so initialisations see identical inputs.
    """
    workdir = Path(workdir)
    summary = synth_dataset(workdir, setup.n_rooms, setup.clips_per_room, seed=setup.corpus_seed,
                            pretrain_clips=setup.pretrain_clips, pretrain_rooms=setup.pretrain_rooms,
                            threads=setup.threads, write_rirs=False)
    pre_raw = pretrain_features(summary.pretrain_paths, feature_cfg, setup.threads)
    stats = fit_stats(pre_raw, feature_cfg)
    raw, entries = manifest_features(workdir / "manifest.jsonl", feature_cfg, setup.threads)
    norm = normalize(raw, stats, feature_cfg)
    sets = {s: LabeledSet(*split_arrays(norm, entries, s, setup.target)) for s in ("train", "val", "test")}
    return ToyCorpus(normalize(pre_raw, stats, feature_cfg), sets)


def _finetune(model: PatchEncoder, corpus: ToyCorpus, setup: ToySetup, seed: int, augment: bool) -> dict:
    cfg = TrainConfig(**{**asdict(setup.train), "augment": augment, "seed": seed, "target": setup.target})
    with torch.no_grad():
        model.regression_head.bias.fill_(float(np.mean(transform_target(corpus.sets["train"].targets))))
    t0 = time.time()
    res = train_with_early_stopping(model, corpus.sets["train"], corpus.sets["val"], cfg,
                                    setup.augment if augment else None, np.random.default_rng([seed, 99]))
    return {"test_log_mse": validation_mse(model, corpus.sets["test"]), "best_val": res.best_val,
            "best_epoch": res.best_epoch, "epochs": len(res.history), "seconds": time.time() - t0}


def run_seed(corpus: ToyCorpus, setup: ToySetup, seed: int) -> dict:
    out = {}
    pre = PatchEncoder(setup.model, seed=seed)
    t0 = time.time()
    pcfg = PretrainConfig(**{**asdict(setup.pretrain), "seed": seed})
    trace, _, _ = pretrain_loop(corpus.pretrain, pre, pcfg)
    out["pretrain"] = {"first_l_total": trace[0]["l_total"], "last_l_total": float(np.mean([r["l_total"] for r in trace[-50:]])),
                       "seconds": time.time() - t0}
    pre_state = {k: v.clone() for k, v in pre.state_dict().items()}

    def from_pretrained() -> PatchEncoder:
        m = PatchEncoder(setup.model, seed=seed)
        state = {k: v for k, v in pre_state.items() if not k.startswith("regression_head.")}
        m.load_state_dict({**m.state_dict(), **state})
        return m

    out["random"] = _finetune(PatchEncoder(setup.model, seed=seed), corpus, setup, seed, augment=False)
    out["pretrained"] = _finetune(from_pretrained(), corpus, setup, seed, augment=False)
    out["pretrained_aug"] = _finetune(from_pretrained(), corpus, setup, seed, augment=True)
    log.info("seed %d: %s", seed, json.dumps(out))
    return out


def summarize(results: List[dict]) -> dict:
    mse = {v: [r[v]["test_log_mse"] for r in results] for v in VARIANTS}
    return {
        "test_log_mse": mse,
        "median": {v: float(np.median(mse[v])) for v in VARIANTS},
        "aug_wins": int(sum(a <= b for a, b in zip(mse["pretrained_aug"], mse["pretrained"]))),
    }


def run(workdir, setup: ToySetup = ToySetup()) -> dict:
    corpus = build_corpus(workdir, setup)
    results = [run_seed(corpus, setup, s) for s in setup.seeds]
    return {"per_seed": results, **summarize(results)}
