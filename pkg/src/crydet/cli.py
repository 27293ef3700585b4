"""``crydet`` command line: featurize, train-backbone, train-head, mine, detect, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Every command reads an optional flat ``key = value`` config file (``--config``
or the ``CRYDET_CONFIG`` environment variable).  Keys are the long flag
names, with ``-`` or ``_``; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from crydet.audio.cryf import BagRecord, write_bags, write_features
from crydet.audio.manifest import load_manifest
from crydet.audio.mel import PROFILES
from crydet.errors import ContractError, CryDetError
from crydet.evaluation import emit_report, evaluate, read_scores
from crydet.mil import VARIANTS, LossConfig
from crydet.model import blazenet_from_weights, head_from_weights, load_weights, save_weights
from crydet.train import (
    AnomalyHyper,
    BackboneHyper,
    backbone_features,
    backbone_scores,
    clip_frames,
    frame_scores,
    load_bag_dir,
    mine_topt,
    train_anomaly,
    train_backbone,
    write_mined,
)

log = logging.getLogger("crydet")

CONFIG_ENV = "CRYDET_CONFIG"


class ConfigError(CryDetError):
    """Invalid configuration; maps to exit code 2."""


# ----------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    for key, raw in config.items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"unknown config key '{key}' for '{parser.prog}' (valid: {', '.join(sorted(actions))})")
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (TypeError, ValueError) as e:
                raise ConfigError(f"config key '{key}': {e}") from e
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"config key '{key}': {value!r} not in {list(action.choices)}")
        parser.set_defaults(**{key: value})


# ----------------------------------------------------------------------
# commands


def _feature_name(path: Path, used: set[str]) -> str:
    name = f"{path.stem}.cryf"
    n = 1
    while name in used:
        name = f"{path.stem}_{n}.cryf"
        n += 1
    used.add(name)
    return name


def cmd_featurize(args) -> int:
    manifest = load_manifest(args.manifest)
    if len(manifest) == 0:
        raise ConfigError(f"manifest {args.manifest} has no entries")
    profile = PROFILES[args.profile]
    if args.raw_spectrogram == bool(args.backbone):
        raise ConfigError("give exactly one of --backbone or --raw-spectrogram")
    net = None
    if args.backbone:
        if profile.target_shape != (64, 64):
            raise ConfigError(f"BlazeNet needs a 64x64 profile, {profile.name} gives {profile.target_shape}")
        net = blazenet_from_weights(load_weights(args.backbone))

    out = Path(args.out)

    def work(entry):
        frames = clip_frames(entry.path, profile, hop_s=args.hop)
        if net is not None:
            return backbone_features(net, frames)
        return frames.reshape(frames.shape[0], -1)

    failures = 0
    by_split: dict[str, list[BagRecord]] = {}
    used: dict[str, set[str]] = {}
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        futures = [(e, pool.submit(work, e)) for e in manifest.entries]
        for entry, fut in futures:
            try:
                feats = fut.result()
            except (CryDetError, OSError) as e:
                log.error("featurize %s failed: %s", entry.path, e)
                failures += 1
                continue
            split_dir = out / entry.split
            split_dir.mkdir(parents=True, exist_ok=True)
            name = _feature_name(entry.path, used.setdefault(entry.split, set()))
            write_features(split_dir / name, feats)
            by_split.setdefault(entry.split, []).append(BagRecord(name, entry.label, int(feats.shape[0])))
    for split, records in by_split.items():
        write_bags(out / split / "bags.csv", records)
    log.info("featurized %d files, %d failed", sum(len(r) for r in by_split.values()), failures)
    return 1 if failures else 0


def cmd_train_backbone(args) -> int:
    try:
        hyper = BackboneHyper(lr=args.lr, momentum=args.momentum, epochs=args.epochs, decay_factor=args.decay_factor,
                              decay_every=args.decay_every, batch=args.batch, seed=args.seed)
    except ContractError as e:
        raise ConfigError(str(e)) from e
    result = train_backbone(load_manifest(args.manifest), hyper, PROFILES[args.profile], log_path=args.log)
    save_weights(result.weights, args.out)
    log.info("best val_acc %.4f at epoch %d -> %s", result.best_val_acc, result.best_at, args.out)
    return 0


def cmd_train_head(args) -> int:
    try:
        loss = LossConfig(margin=args.margin, alpha=args.alpha, lambda1=args.lambda1, lambda2=args.lambda2,
                          k=args.top_k, variant=args.variant)
        hyper = AnomalyHyper(lr=args.lr, steps=args.steps, batch=args.batch, segments=args.segments, loss=loss,
                             seed=args.seed, dropout=args.dropout, eval_every=args.eval_every)
    except ContractError as e:
        raise ConfigError(f"invalid head configuration: {e}") from e
    bags = load_bag_dir(args.features)
    val = load_bag_dir(args.val_features) if args.val_features else None
    result = train_anomaly(bags, hyper, val_bags=val, log_path=args.log)
    save_weights(result.weights, args.out)
    log.info("head saved to %s (checkpoint step %d)", args.out, result.best_at)
    return 0


def cmd_mine(args) -> int:
    if args.t < 1:
        raise ConfigError("--t must be >= 1")
    head = head_from_weights(load_weights(args.head))
    records = mine_topt(head, load_bag_dir(args.features), args.t)
    write_mined(args.out, records)
    log.info("mined %d frames -> %s", len(records), args.out)
    return 0


def cmd_detect(args) -> int:
    profile = PROFILES[args.profile]
    if profile.target_shape != (64, 64):
        raise ConfigError(f"detect needs a BlazeNet profile, got {profile.name}")
    net = blazenet_from_weights(load_weights(args.backbone))
    frames = clip_frames(args.wav, profile, hop_s=args.hop)
    if args.head:
        head = head_from_weights(load_weights(args.head))
        scores, _ = frame_scores(head, backbone_features(net, frames))
    else:
        scores = backbone_scores(net, frames)
    fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start_s", "score", "label"])
        for i, s in enumerate(scores):
            w.writerow([f"{i * args.hop:.3f}", f"{float(s):.6f}", "cry" if s >= args.threshold else "other"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_eval(args) -> int:
    report = evaluate(read_scores(args.scores), args.threshold)
    mpath, rpath = emit_report(report, args.out)
    log.info("auc %.4f f1_max %.4f @ %.4f -> %s, %s", report.auc, report.f1_max, report.f1_max_threshold, mpath, rpath)
    return 0


# ----------------------------------------------------------------------
# parser


def _finite_float(s: str) -> float:
    v = float(s)
    if not np.isfinite(v):
        raise ValueError(f"{s} is not finite")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="crydet", description="Weakly supervised baby-cry detection.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command")

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", default=os.environ.get(CONFIG_ENV),
                       help=f"flat key = value config file (env {CONFIG_ENV})")
        p.set_defaults(func=func)
        return p

    p = command("featurize", cmd_featurize, "Write one CRYF feature file per audio file plus bags.csv per split.")
    p.add_argument("--manifest", help="CSV with header path,label,split")
    p.add_argument("--out", help="output directory; one sub-directory per split")
    p.add_argument("--profile", default="blazenet", choices=sorted(PROFILES), help="log-Mel parameter profile")
    p.add_argument("--backbone", default=None, help="BlazeNet weights; emit 224-d features")
    p.add_argument("--raw-spectrogram", action="store_true", help="emit flattened log-Mel frames instead")
    p.add_argument("--hop", type=_finite_float, default=1.0, help="frame hop in seconds")
    p.add_argument("--workers", type=int, default=1, help="worker threads over files (chosen)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; featurizing is deterministic")

    p = command("train-backbone", cmd_train_backbone, "Supervised BlazeNet training on 1 s frames.")
    p.add_argument("--manifest")
    p.add_argument("--out", help="weight file to write")
    p.add_argument("--log", default=None, help="training log CSV")
    p.add_argument("--profile", default="blazenet", choices=[k for k, v in PROFILES.items() if v.target_shape == (64, 64)])
    p.add_argument("--lr", type=_finite_float, default=1e-3, help="initial SGD learning rate")
    p.add_argument("--momentum", type=_finite_float, default=0.9)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--decay-factor", type=_finite_float, default=0.1)
    p.add_argument("--decay-every", type=int, default=20, help="epochs between learning-rate decays")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0, help="(chosen)")

    p = command("train-head", cmd_train_head, "Weakly supervised anomaly-head training on CRYF bags.")
    p.add_argument("--features", help="directory with bags.csv and CRYF files")
    p.add_argument("--val-features", default=None, help="validation bag directory")
    p.add_argument("--out")
    p.add_argument("--log", default=None)
    p.add_argument("--lr", type=_finite_float, default=1e-3, help="Adam learning rate (optimizer family chosen)")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch", type=int, default=128, help="half abnormal, half normal")
    p.add_argument("--segments", type=int, default=10, help="segments per bag (10 for untrimmed, 5 for 5 s files)")
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--margin", type=_finite_float, default=100.0, help="magnitude hinge margin (chosen)")
    p.add_argument("--alpha", type=_finite_float, default=1e-4, help="magnitude loss weight (chosen)")
    p.add_argument("--lambda1", type=_finite_float, default=8e-4, help="smoothness weight (chosen)")
    p.add_argument("--lambda2", type=_finite_float, default=8e-4, help="sparsity weight (chosen)")
    p.add_argument("--variant", default="rtfm", choices=VARIANTS, help="score_mil: top-score hinge; rtfm: top-k BCE plus magnitude hinge")
    p.add_argument("--dropout", type=_finite_float, default=0.7, help="(chosen)")
    p.add_argument("--eval-every", type=int, default=100, help="steps between validations (chosen)")
    p.add_argument("--seed", type=int, default=0, help="(chosen)")

    p = command("mine", cmd_mine, "Keep the top-t scored 1 s frames of every file.")
    p.add_argument("--features")
    p.add_argument("--head", help="anomaly-head weights")
    p.add_argument("--t", type=int, default=2, help="frames kept per file")
    p.add_argument("--out", help="mined CSV")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; mining is deterministic")

    p = command("detect", cmd_detect, "Score every 1 s frame of a WAV file.")
    p.add_argument("--backbone", help="BlazeNet weights")
    p.add_argument("--head", default=None, help="anomaly-head weights; omit to use the BlazeNet classifier")
    p.add_argument("--wav")
    p.add_argument("--hop", type=_finite_float, default=1.0, help="seconds between frames")
    p.add_argument("--threshold", type=float, default=0.5, help="score >= threshold is cry")
    p.add_argument("--profile", default="blazenet", choices=[k for k, v in PROFILES.items() if v.target_shape == (64, 64)])
    p.add_argument("--out", default=None, help="scores CSV (stdout when omitted)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; detection is deterministic")

    p = command("eval", cmd_eval, "Accuracy, F1-max and ROC from an id,score,label CSV.")
    p.add_argument("--scores")
    p.add_argument("--out", help="directory for metrics.json and roc.csv")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")

    for sp in sub.choices.values():
        for action in sp._actions:
            if action.help is None:
                action.help = "(default: %(default)s)"
    return parser


REQUIRED = {
    "featurize": ("manifest", "out"),
    "train-backbone": ("manifest", "out"),
    "train-head": ("features", "out"),
    "mine": ("features", "head", "out"),
    "detect": ("backbone", "wav"),
    "eval": ("scores", "out"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            subparser = parser._subparsers._group_actions[0].choices[args.command]
            _apply_config(subparser, read_config(args.config))
            args = parser.parse_args(argv)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
        if missing:
            raise ConfigError(f"{args.command}: missing required option(s) {', '.join(missing)}")
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    except (CryDetError, OSError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
