#!/usr/bin/env python3
"""Fused-vs-baseline direction check on a fixed small mixture set.

Trains the offline backbone with and without mixture-feature fusion under
identical seeds/data and compares enrollment-clue SNRi.  At desk scale the
expectation is weak and directional: fusion should not hurt by more than
half a dB.

    python3 scripts/run_fusion_check.py --seeds 3 --steps 600
"""

import argparse
import sys
import time

import numpy as np
import torch

sys.path.insert(0, "src")

from tseforge.clues import ClueSpec
from tseforge.evalkit import snri
from tseforge.mixsim import MixConfig, default_bank, make_mixture
from tseforge.signal_core import Waveform
from tseforge.systems import build_system
from tseforge.trainer import make_batch, multitask_step


def train_one(preset, seed, samples, steps, lr, batch, crop, unfreeze=False):
    torch.manual_seed(seed)
    if unfreeze:
        from dataclasses import replace
        from tseforge.systems import preset_config
        system = build_system(replace(preset_config(preset), freeze_m2d=False))
    else:
        system = build_system(preset)
    pool = [(s, t) for s in samples for t in range(len(s.targets))]
    opt = torch.optim.Adam(system.trainable_parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        picks = rng.choice(len(pool), size=batch, replace=True)
        b = make_batch([pool[i] for i in picks], n_classes=4,
                       crop_len=crop, rng=rng)
        multitask_step(system, b, opt, alpha=0.0)  # enrollment path only
    return system


def eval_enroll_snri(system, samples):
    system.eval()
    gains = []
    for sample in samples:
        for tgt in sample.targets:
            clue = ClueSpec(kind="enrollment",
                            enrollment=Waveform(samples=tgt.enrollment))
            est = system.tse_forward(sample.mixture, clue)
            gains.append(snri(est, tgt.reference, sample.mixture))
    return float(np.mean(gains))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--crop", type=int, default=8000)
    ap.add_argument("--n-mixtures", type=int, default=64)
    ap.add_argument("--duration", type=float, default=1.0)
    ap.add_argument("--unfreeze", action="store_true",
                    help="train the feature encoder jointly in the fused runs")
    args = ap.parse_args()

    bank = default_bank(4)
    cfg = MixConfig(duration_s=args.duration)
    print("synthesizing mixtures...", flush=True)
    samples = [make_mixture(bank, cfg, seed=9000 + s)
               for s in range(args.n_mixtures)]

    print(f"{'seed':>4}  {'baseline':>9}  {'fused':>9}  {'gap':>7}")
    for seed in range(args.seeds):
        t0 = time.time()
        base = train_one("soundbeam-baseline", seed, samples,
                         args.steps, args.lr, args.batch, args.crop)
        b_snri = eval_enroll_snri(base, samples)
        fused = train_one("soundbeam-m2d-mix", seed, samples,
                          args.steps, args.lr, args.batch, args.crop,
                          unfreeze=args.unfreeze)
        f_snri = eval_enroll_snri(fused, samples)
        print(f"{seed:>4}  {b_snri:9.3f}  {f_snri:9.3f}  "
              f"{f_snri - b_snri:+7.3f}  [{time.time()-t0:.0f}s]", flush=True)


if __name__ == "__main__":
    main()
