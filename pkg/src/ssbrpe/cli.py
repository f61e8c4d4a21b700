"""Command-line entry point: ``ssbrpe <subcommand> [options]``.

Subcommands: dataset-synth, pretrain, finetune, eval, predict. Settings
resolve as built-in defaults, then ``--config`` JSON files in order, then
flags. Every run writes its resolved config next to its outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import numerics as nx
from .checkpoint import check_feature_compat, load_model, save_model
from .dataset import load_clip, read_manifest
from .errors import CompatibilityError, ConfigError, DataError, NumericError, SSBRPEError
from .features import FeatureConfig
from .finetune import AugmentConfig, LabeledSet, TrainConfig, predict, predict_log, train_with_early_stopping
from .finetune import inverse_transform, transform_target
from .metrics import compare_to_reference, evaluate
from .model import ModelConfig, PatchEncoder
from .pipeline import (fit_stats, load_speech_dir, manifest_features, normalize, pretrain_features, split_arrays,
                       synth_dataset)
from .pretrain import PretrainConfig, PretrainState, pretrain_loop, resume
from .rir import RoomSamplingConfig
from .dataset import list_wavs

log = logging.getLogger("ssbrpe")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "deterministic": False,
    "feature": asdict(FeatureConfig()),
    "model": ModelConfig.desk().to_dict(),
    "pretrain": asdict(PretrainConfig()),
    "train": asdict(TrainConfig()),
    "augment": asdict(AugmentConfig()),
    "sampling": asdict(RoomSamplingConfig()),
    "dataset": {
        "rooms": 200, "clips_per_room": 2, "keep_room_fraction": 1.0, "fractions": [0.8, 0.1, 0.1],
        "snr_range": [0.0, 30.0], "pretrain_clips": 0, "pretrain_rooms": 20, "speech_dir": None, "n_speech": 32,
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    for path in args.config or []:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.deterministic:
        cfg["deterministic"] = True
        cfg["threads"] = 1
    for dotted, value in (getattr(args, "overrides", None) or {}).items():
        section, key = dotted.split(".")
        if value is not None:
            cfg[section][key] = value
    cfg["workdir"] = str(args.workdir)
    return cfg


def _build(cls, d: dict):
    try:
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} settings: {exc}") from None


def write_resolved(cfg: dict, name: str) -> None:
    p = Path(cfg["workdir"]) / f"{name}.config.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def setup_runtime(cfg: dict) -> None:
    if cfg["deterministic"]:
        nx.set_deterministic(1)
    else:
        torch.set_num_threads(max(1, int(cfg["threads"])))


# --- subcommands -----------------------------------------------------------

def cmd_dataset_synth(cfg: dict) -> int:
    ds = cfg["dataset"]
    speech = load_speech_dir(ds["speech_dir"]) if ds["speech_dir"] else None
    write_resolved(cfg, "dataset-synth")
    summary = synth_dataset(
        cfg["workdir"], ds["rooms"], ds["clips_per_room"], seed=cfg["seed"], keep_fraction=ds["keep_room_fraction"],
        fractions=tuple(ds["fractions"]), snr_range=tuple(ds["snr_range"]), speech=speech, n_speech=ds["n_speech"],
        pretrain_clips=ds["pretrain_clips"], pretrain_rooms=ds["pretrain_rooms"],
        sampling=_build(RoomSamplingConfig, cfg["sampling"]), threads=cfg["threads"])
    counts = {s: sum(e.split == s for e in summary.entries) for s in ("train", "val", "test")}
    print(f"wrote {len(summary.entries)} manifest lines ({counts}) to {Path(cfg['workdir']) / 'manifest.jsonl'}")
    if summary.pretrain_paths:
        print(f"wrote {len(summary.pretrain_paths)} unlabeled clips to {Path(cfg['workdir']) / 'pretrain'}")
    return 0


def cmd_pretrain(cfg: dict, args) -> int:
    workdir = Path(cfg["workdir"])
    out = Path(args.out) if args.out else workdir / "pretrain.ckpt"
    trace = Path(args.trace) if args.trace else workdir / "pretrain_trace.csv"
    clip_dir = Path(args.clips) if args.clips else workdir / "pretrain"
    paths = list_wavs(clip_dir)
    if args.resume:
        model, pcfg, optimizer, state, feature_cfg, stats = resume(args.resume)
        overrides = {k: v for k, v in cfg["pretrain"].items() if k == "steps"}
        pcfg = _build(PretrainConfig, {**asdict(pcfg), **overrides})
        cfg["pretrain"] = asdict(pcfg)
        cfg["model"] = model.cfg.to_dict()
        cfg["feature"] = feature_cfg.to_dict()
    else:
        feature_cfg = _build(FeatureConfig, cfg["feature"])
        pcfg = _build(PretrainConfig, {**cfg["pretrain"], "seed": cfg["seed"]})
        cfg["pretrain"] = asdict(pcfg)
        model = PatchEncoder(_build(ModelConfig, cfg["model"]), seed=cfg["seed"])
        optimizer, state, stats = None, None, None
    write_resolved(cfg, "pretrain")
    raw = pretrain_features(paths, feature_cfg, cfg["threads"])
    if stats is None:
        stats = fit_stats(raw, feature_cfg)
    corpus = normalize(raw, stats, feature_cfg)
    start = state.step if state else 0
    rows, state, _ = pretrain_loop(corpus, model, pcfg, optimizer, state, trace_path=trace, checkpoint_path=out,
                                   feature_cfg=feature_cfg, stats=stats, extra_header={"run_config": cfg})
    last = rows[-1] if rows else None
    print(f"pretrained steps {start}..{state.step - 1}; checkpoint {out}; trace {trace}")
    if last:
        print(f"final l_d={last['l_d']:.4f} l_g={last['l_g']:.4f} l_total={last['l_total']:.4f}")
    return 0


def _load_split_sets(cfg, feature_cfg, stats, manifest, target):
    raw, entries = manifest_features(manifest, feature_cfg, cfg["threads"])
    if stats is None:
        tr_raw, _ = split_arrays(raw, entries, "train", target)
        if len(tr_raw) == 0:
            raise DataError("manifest has no training entries")
        stats = fit_stats(tr_raw, feature_cfg)
    norm = normalize(raw, stats, feature_cfg)
    sets = {s: LabeledSet(*split_arrays(norm, entries, s, target)) for s in ("train", "val", "test")}
    return sets, stats, entries


def init_model(init: str, model_cfg: ModelConfig, feature_cfg: FeatureConfig, seed: int):
    """Random or pretrained initialisation; returns ``(model, feature_cfg, stats)``."""
    if init == "random":
        return PatchEncoder(model_cfg, seed=seed), feature_cfg, None
    pre, pre_feat, stats, header, _ = load_model(init)
    if pre_feat.fingerprint() != feature_cfg.fingerprint():
        raise CompatibilityError(
            f"feature config mismatch: checkpoint {pre_feat.fingerprint()} vs extractor {feature_cfg.fingerprint()}")
    fresh = PatchEncoder(pre.cfg, seed=seed)
    with torch.no_grad():
        for name, p in fresh.named_parameters():
            if not name.startswith("regression_head."):
                p.copy_(dict(pre.named_parameters())[name])
    return fresh, pre_feat, stats


def cmd_finetune(cfg: dict, args) -> int:
    workdir = Path(cfg["workdir"])
    manifest = Path(args.manifest) if args.manifest else workdir / "manifest.jsonl"
    tcfg = _build(TrainConfig, {**cfg["train"], "seed": cfg["seed"]})
    cfg["train"] = asdict(tcfg)
    feature_cfg = _build(FeatureConfig, cfg["feature"])
    model, feature_cfg, stats = init_model(args.init, _build(ModelConfig, cfg["model"]), feature_cfg, cfg["seed"])
    cfg["model"] = model.cfg.to_dict()
    cfg["init"] = args.init
    write_resolved(cfg, f"finetune_{tcfg.target}")
    sets, stats, _ = _load_split_sets(cfg, feature_cfg, stats, manifest, tcfg.target)
    with torch.no_grad():
        model.regression_head.bias.fill_(float(np.mean(transform_target(sets["train"].targets))))
    out = Path(args.out) if args.out else workdir / f"finetune_{tcfg.target}.ckpt"
    history = Path(args.history) if args.history else workdir / f"finetune_{tcfg.target}_history.csv"
    aug = _build(AugmentConfig, cfg["augment"]) if tcfg.augment else None
    result = train_with_early_stopping(model, sets["train"], sets["val"], tcfg, aug,
                                       np.random.default_rng(cfg["seed"]), history_path=history)
    save_model(out, model, feature_cfg, stats, extra={
        "run_config": cfg, "target": tcfg.target, "best_epoch": result.best_epoch, "best_val_mse": result.best_val})
    print(f"best epoch {result.best_epoch} val log-MSE {result.best_val:.5f} "
          f"({len(result.history)} epochs{', stopped early' if result.stopped_early else ''})")
    print(f"checkpoint {out}; history {history}")
    return 0


def _read_predictions(path):
    pred, true = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pred.append(float(row["pred"]))
            true.append(float(row["true"]))
    return pred, true


def cmd_eval(cfg: dict, args) -> int:
    workdir = Path(cfg["workdir"])
    if args.predictions:
        pred, true = _read_predictions(args.predictions)
        target = args.target or cfg["train"]["target"]
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        model, feature_cfg, stats, header, _ = load_model(args.checkpoint)
        check_feature_compat(header, _build(FeatureConfig, cfg["feature"]))
        target = args.target or header.get("target", "volume")
        manifest = Path(args.manifest) if args.manifest else workdir / "manifest.jsonl"
        entries = [e for e in read_manifest(manifest) if e.split == args.split]
        if not entries:
            raise DataError(f"no {args.split!r} entries in {manifest}")
        raw, _ = manifest_features(manifest, feature_cfg, cfg["threads"], entries=entries)
        feats = normalize(raw, stats, feature_cfg) if stats is not None else raw
        pred = inverse_transform(predict_log(model, feats)).tolist()
        true = [e.volume_m3 if target == "volume" else e.rt60_s for e in entries]
    report = evaluate(pred, true)
    unit = "m^3" if target == "volume" else "s"
    write_resolved(cfg, "eval")
    out = Path(args.report) if args.report else workdir / f"eval_{target}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(target=target, run_config=cfg) + "\n")
    print(report.format_table(unit))
    print()
    print(compare_to_reference(report, target))
    return 0


def cmd_predict(cfg: dict, args) -> int:
    model, feature_cfg, stats, header, _ = load_model(args.checkpoint)
    check_feature_compat(header, _build(FeatureConfig, cfg["feature"]))
    for path in args.wavs:
        clip = load_clip(path)
        if clip.sample_rate != feature_cfg.sample_rate:
            raise DataError(f"{path}: expected {feature_cfg.sample_rate} Hz, got {clip.sample_rate} Hz")
        value = predict(model, clip.samples, feature_cfg, stats, header.get("feature_fingerprint"))
        print(f"{path}\t{value:.6g}")
    return 0


# --- parser ----------------------------------------------------------------

class _Override(argparse.Action):
    def __call__(self, parser, ns, values, option_string=None):
        # subcommand options parse into a fresh namespace, so create the dict lazily
        if getattr(ns, "overrides", None) is None:
            ns.overrides = {}
        ns.overrides[self.dest_key] = values


def _opt(p, flag, key, **kw):
    action = type("O", (_Override,), {"dest_key": key})
    kw.setdefault("metavar", key.rsplit(".", 1)[-1].upper())
    p.add_argument(flag, action=action, dest="_" + key.replace(".", "_"), default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", type=Path, default=Path("work"))
    common.add_argument("--config", action="append", help="JSON config file (repeatable, later wins)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ssbrpe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-synth", parents=[common], help="render RIRs, clips and a manifest")
    _opt(p, "--rooms", "dataset.rooms", type=int)
    _opt(p, "--clips-per-room", "dataset.clips_per_room", type=int)
    _opt(p, "--keep-room-fraction", "dataset.keep_room_fraction", type=float)
    _opt(p, "--pretrain-clips", "dataset.pretrain_clips", type=int)
    _opt(p, "--pretrain-rooms", "dataset.pretrain_rooms", type=int)
    _opt(p, "--speech-dir", "dataset.speech_dir")

    p = sub.add_parser("pretrain", parents=[common], help="masked patch pretraining on unlabeled clips")
    p.add_argument("--clips", help="directory of unlabeled WAVs (default WORKDIR/pretrain)")
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    p.add_argument("--out")
    p.add_argument("--trace")
    _opt(p, "--steps", "pretrain.steps", type=int)
    _opt(p, "--lambda", "pretrain.lam", type=float)
    _opt(p, "--batch-size", "pretrain.batch_size", type=int)
    _opt(p, "--lr", "pretrain.lr", type=float)
    _opt(p, "--mask-fraction", "pretrain.mask_fraction", type=float)
    _opt(p, "--checkpoint-every", "pretrain.checkpoint_every", type=int)

    p = sub.add_parser("finetune", parents=[common], help="supervised fine-tuning with early stopping")
    p.add_argument("--manifest")
    p.add_argument("--init", default="random", help="'random' or a pretraining checkpoint path")
    p.add_argument("--out")
    p.add_argument("--history")
    _opt(p, "--target", "train.target", choices=["volume", "rt60"])
    _opt(p, "--max-epochs", "train.max_epochs", type=int)
    _opt(p, "--patience", "train.patience", type=int)
    _opt(p, "--lr", "train.lr", type=float)
    _opt(p, "--batch-size", "train.batch_size", type=int)
    p.add_argument("--no-augment", action="store_const", const=False, dest="augment")

    p = sub.add_parser("eval", parents=[common], help="metrics on a split or on a predictions CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--predictions", help="CSV with columns pred,true (linear units)")
    p.add_argument("--target", choices=["volume", "rt60"])
    p.add_argument("--report")

    p = sub.add_parser("predict", parents=[common], help="estimate the room parameter of WAV files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("wavs", nargs="+")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if getattr(args, "augment", None) is False:
            cfg["train"]["augment"] = False
        setup_runtime(cfg)
        if args.command == "dataset-synth":
            return cmd_dataset_synth(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args)
        if args.command == "finetune":
            return cmd_finetune(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        return cmd_predict(cfg, args)
    except SSBRPEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
