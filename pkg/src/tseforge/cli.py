"""Operator entry point: train, extract, evaluate, report, inspect.

Configs are flat YAML key/value documents with preset inheritance: a
`preset` key picks one of the eight named systems, every other key
overrides one training/system/data field.  `train` writes the fully
resolved config next to its outputs; reloading that file reproduces the
run.  Exit codes: 0 success, 1 missing/unusable files, 2 malformed config
or usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch
import yaml

from .clues import ClueSpec
from .evalkit import emit_report, evaluate
from .checkpoint import load_checkpoint
from .mixsim import MixConfig, default_bank, derive_seed, make_mixture, write_manifest
from .signal_core import Waveform, read_wav, write_wav
from .systems import PRESETS, SystemConfig, TSESystem, preset_config
from .trainer import RunConfig, fit


class ConfigError(ValueError):
    """Malformed configuration (unknown key, bad value, unknown preset)."""


# flat config vocabulary: key -> (type, default-source)
SYSTEM_KEYS = {"backbone": str, "m2d_enroll": bool, "m2d_mixture": bool,
               "n_classes": int, "aie_width": int, "freeze_m2d": bool}
RUN_KEYS = {"steps": int, "batch_size": int, "lr": float, "clip_norm": float,
            "alpha": float, "val_every": int, "seed": int, "crop_len": int,
            "enroll_crop": int, "alternate_clues": bool}
DATA_KEYS = {"duration_s": float, "n_train": int, "n_val": int, "data_seed": int}
RUN_DEFAULTS = {"steps": 200, "batch_size": 4, "lr": 5e-4, "clip_norm": 5.0,
                "alpha": 0.5, "val_every": 50, "seed": 0, "crop_len": None,
                "enroll_crop": None, "alternate_clues": False}
DATA_DEFAULTS = {"duration_s": 1.0, "n_train": 16, "n_val": 4, "data_seed": 0}


def _coerce(key, want, value):
    if value is None:
        return None
    if want is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key!r} wants true/false, got {value!r}")
    try:
        out = want(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} wants {want.__name__}, got {value!r}")
    if want is int and isinstance(value, float) and value != out:
        raise ConfigError(f"config key {key!r} wants an integer, got {value!r}")
    return out


def load_config(path) -> dict:
    """Read a flat YAML mapping; anything else is malformed."""
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}")
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a flat key/value mapping, got {type(doc).__name__}")
    return doc


def resolve_config(doc: dict) -> dict:
    """Expand preset inheritance into a complete flat config.

    The result names every key explicitly, so resolving it again is a
    fixed point: emitted resolved configs reload to the identical run.
    """
    known = {"preset", *SYSTEM_KEYS, *RUN_KEYS, *DATA_KEYS}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    preset = doc.get("preset", "soundbeam-baseline")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = preset_config(preset)

    resolved = {"preset": preset}
    for key, want in SYSTEM_KEYS.items():
        value = doc.get(key, getattr(base, key))
        resolved[key] = _coerce(key, want, value)
    for key, want in RUN_KEYS.items():
        value = doc.get(key, RUN_DEFAULTS[key])
        resolved[key] = _coerce(key, want, value)
    for key, want in DATA_KEYS.items():
        value = doc.get(key, DATA_DEFAULTS[key])
        resolved[key] = _coerce(key, want, value)
    try:
        build_system_config(resolved)  # validate combinations early
        RunConfig(**{k: resolved[k] for k in RUN_KEYS})
    except ValueError as e:
        raise ConfigError(str(e))
    return resolved


def build_system_config(resolved: dict) -> SystemConfig:
    base = preset_config(resolved["preset"])
    from dataclasses import replace
    return replace(base, **{k: resolved[k] for k in SYSTEM_KEYS})


def _run_config(resolved: dict, out_dir) -> RunConfig:
    kwargs = {k: resolved[k] for k in RUN_KEYS}
    return RunConfig(**kwargs,
                     log_path=os.path.join(out_dir, "train_log.jsonl"),
                     ckpt_path=os.path.join(out_dir, "checkpoint.pt"))


def _load_system(ckpt_path) -> tuple:
    """Rebuild a system from a checkpoint; (system, payload)."""
    if not os.path.exists(ckpt_path):
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    payload = load_checkpoint(ckpt_path)
    if "system" not in payload["configs"]:
        raise ValueError(f"checkpoint carries no system config: {ckpt_path}")
    system = TSESystem(SystemConfig.from_dict(payload["configs"]["system"]))
    try:
        system.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise ValueError(f"checkpoint/config mismatch: {e}")
    system.eval()
    return system, payload


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    doc = load_config(args.config) if args.config else {}
    if args.preset:
        doc["preset"] = args.preset
    if args.seed is not None:
        doc["seed"] = args.seed
    resolved = resolve_config(doc)

    out_dir = args.out_dir or os.path.join("runs", resolved["preset"])
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.yaml"), "w") as f:
        yaml.safe_dump(resolved, f, sort_keys=True)

    torch.manual_seed(resolved["seed"])
    system = TSESystem(build_system_config(resolved))
    bank = default_bank(resolved["n_classes"])
    mix_cfg = MixConfig(duration_s=resolved["duration_s"])
    train_seeds = [derive_seed(resolved["data_seed"], 0, i)
                   for i in range(resolved["n_train"])]
    val_seeds = [derive_seed(resolved["data_seed"], 1, i)
                 for i in range(resolved["n_val"])]
    write_manifest(os.path.join(out_dir, "train.manifest"), bank, mix_cfg, train_seeds)
    write_manifest(os.path.join(out_dir, "val.manifest"), bank, mix_cfg, val_seeds)
    train_set = [make_mixture(bank, mix_cfg, s) for s in train_seeds]
    val_set = [make_mixture(bank, mix_cfg, s) for s in val_seeds]

    run_cfg = _run_config(resolved, out_dir)
    result = fit(system, train_set, val_set, run_cfg,
                 extra_configs={"system": system.cfg.to_dict(),
                                "resolved": resolved})
    print(f"trained {resolved['preset']}: best val SI-SNR "
          f"{result.best_val_si_snr:.2f} dB at step {result.best_step}")
    print(f"checkpoint: {run_cfg.ckpt_path}")
    print(f"log: {run_cfg.log_path}")
    return 0


def _clue_from_args(parser, args, n_classes) -> ClueSpec:
    if (args.label is None) == (args.enroll is None):
        parser.error("exactly one of --label or --enroll is required")
    if args.label is not None:
        if not 0 <= args.label < n_classes:
            parser.error(f"--label must be in [0, {n_classes})")
        hot = np.zeros(n_classes)
        hot[args.label] = 1.0
        return ClueSpec(kind="class_label", label=hot)
    return ClueSpec(kind="enrollment", enrollment=read_wav(args.enroll))


def cmd_extract(args, parser) -> int:
    system, _ = _load_system(args.checkpoint)
    torch.manual_seed(args.seed or 0)
    clue = _clue_from_args(parser, args, system.cfg.n_classes)
    mixture = read_wav(args.mixture)
    est = system.tse_forward(mixture, clue)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "extracted.wav")
    write_wav(out_path, est)
    print(f"wrote {out_path} ({len(est.samples)} samples)")
    return 0


CLUE_FLAG_TO_KIND = {"label": "class_label", "enroll": "enrollment"}


def _evaluate_kinds(args, system):
    kinds = ([CLUE_FLAG_TO_KIND[args.clue]] if args.clue
             else list(CLUE_FLAG_TO_KIND.values()))
    return [evaluate(system, args.manifest, kind) for kind in kinds]


def _print_summary(reports):
    print("clue_kind        n   mean_snri_db  failure_rate_pct")
    for rep in reports:
        print(f"{rep['clue_kind']:<15} {rep['n_samples']:>3}   "
              f"{rep['mean_snri_db']:>12.4f}  {rep['failure_rate_pct']:>16.2f}")


def cmd_evaluate(args) -> int:
    system, _ = _load_system(args.checkpoint)
    reports = _evaluate_kinds(args, system)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.json")
    slim = [{k: v for k, v in rep.items() if k != "rows"} for rep in reports]
    with open(metrics_path, "w") as f:
        json.dump(slim, f, indent=2, sort_keys=True)
    _print_summary(reports)
    print(f"metrics: {metrics_path}")
    return 0


def cmd_report(args) -> int:
    system, _ = _load_system(args.checkpoint)
    reports = _evaluate_kinds(args, system)
    paths = emit_report(reports, args.out_dir or ".")
    _print_summary(reports)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_inspect(args) -> int:
    system, payload = _load_system(args.checkpoint)
    cfg = system.cfg
    print(f"backbone: {cfg.backbone}")
    print(f"m2d_enroll: {cfg.m2d_enroll}   m2d_mixture: {cfg.m2d_mixture}")
    total = sum(p.numel() for p in system.parameters())
    trainable = sum(p.numel() for p in system.trainable_parameters())
    print(f"parameters: {total} total, {trainable} trainable")
    for key, value in sorted(payload.get("extra", {}).items()):
        print(f"{key}: {value}")
    if system.aie is not None:
        weights = system.aie.weights().detach().tolist()
        rendered = " ".join(f"{w:.6f}" for w in weights)
        print(f"fusion layer weights: {rendered}")
        print(f"fusion weight sum: {sum(weights):.6f}")
    else:
        print("fusion layer weights: none (no mixture fusion)")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tseforge",
        description="Target sound extraction: train, run, and score models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a system from a config/preset")
    p_train.add_argument("--config", help="flat YAML config file")
    p_train.add_argument("--preset", help=f"system preset ({', '.join(sorted(PRESETS))})")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out-dir", help="output directory (default runs/<preset>)")

    p_ex = sub.add_parser("extract", help="extract one target from a mixture wav")
    p_ex.add_argument("mixture", help="input mixture wav")
    p_ex.add_argument("--checkpoint", required=True)
    p_ex.add_argument("--label", type=int, help="target class id")
    p_ex.add_argument("--enroll", help="enrollment wav of the target")
    p_ex.add_argument("--seed", type=int)
    p_ex.add_argument("--out-dir")

    for name, fn in (("evaluate", cmd_evaluate), ("report", cmd_report)):
        p = sub.add_parser(name, help=f"{name} a checkpoint on a manifest")
        p.add_argument("manifest", help="mixture manifest file")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--clue", choices=sorted(CLUE_FLAG_TO_KIND),
                       help="evaluate one clue kind only (default: both)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.set_defaults(fn=fn)

    p_in = sub.add_parser("inspect", help="describe a checkpoint")
    p_in.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "extract":
            return cmd_extract(args, parser)
        if args.command in ("evaluate", "report"):
            return args.fn(args)
        return cmd_inspect(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
