"""Shared fixtures: one briefly trained toy system for behavior tests."""

from types import SimpleNamespace

import pytest
import torch

from tseforge.mixsim import MixConfig, default_bank, make_mixture
from tseforge.systems import build_system
from tseforge.trainer import RunConfig, fit


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory):
    """A small offline system trained for a couple hundred steps.

    Enough optimization that clue conditioning is load-bearing, cheap enough
    to build once per session.
    """
    out = tmp_path_factory.mktemp("trained_toy")
    torch.manual_seed(0)
    system = build_system("soundbeam-baseline")
    bank = default_bank(4)
    mix_cfg = MixConfig(duration_s=0.5, reverb_len_s=0.1)
    samples = [make_mixture(bank, mix_cfg, seed=s) for s in range(1000, 1004)]
    cfg = RunConfig(steps=150, batch_size=2, lr=2e-3, val_every=75, seed=0,
                    crop_len=4000, alpha=0.5,
                    ckpt_path=str(out / "best.pt"),
                    log_path=str(out / "log.jsonl"))
    result = fit(system, samples, samples[:2], cfg,
                 extra_configs={"system": system.cfg.to_dict()})
    system.eval()
    return SimpleNamespace(system=system, bank=bank, mix_cfg=mix_cfg,
                           samples=samples, result=result, dir=out)
