"""Training loop: batching, multitask objective, determinism, divergence."""

import json
import math

import numpy as np
import pytest
import torch

from tseforge.checkpoint import load_checkpoint
from tseforge.losses import LossConfig, pair_loss
from tseforge.mixsim import MixConfig, default_bank, make_mixture
from tseforge.systems import build_system
from tseforge.trainer import (RunConfig, TrainingDiverged, fit, make_batch,
                              multitask_step, validate_si_snr)

BANK = default_bank(4)
SHORT = MixConfig(duration_s=0.5, reverb_len_s=0.1)


@pytest.fixture(scope="module")
def samples():
    return [make_mixture(BANK, SHORT, seed=s) for s in range(3)]


def _pairs(samples):
    return [(s, t) for s in samples for t in range(len(s.targets))]


def _fresh_system(seed=0, name="soundbeam-baseline"):
    torch.manual_seed(seed)
    return build_system(name)


# ----------------------------------------------------------------- batching


def test_make_batch_shapes(samples):
    batch = make_batch(_pairs(samples)[:3], n_classes=4)
    n = len(samples[0].mixture)
    assert batch.mixture.shape == (3, n)
    assert batch.reference.shape == (3, n)
    assert batch.one_hot.shape == (3, 4)
    assert batch.enrollment is not None
    # one-hot rows match the targets they were built from
    for row, (sample, t_idx) in zip(batch.one_hot, _pairs(samples)[:3]):
        assert row.sum() == 1.0
        assert row[sample.targets[t_idx].class_id] == 1.0


def test_make_batch_synchronized_crop(samples):
    rng = np.random.default_rng(0)
    sample, t_idx = _pairs(samples)[0]
    batch = make_batch([(sample, t_idx)], n_classes=4, crop_len=2000, rng=rng)
    assert batch.mixture.shape == (1, 2000)
    mix = batch.mixture[0].numpy().astype(np.float64)
    # locate the crop in the source mixture, then demand the reference crop
    # came from the same offset
    full = sample.mixture
    starts = [s for s in range(len(full) - 1999)
              if np.array_equal(full[s:s + 2000].astype(np.float32),
                                mix.astype(np.float32))]
    assert len(starts) >= 1
    ref = sample.targets[t_idx].reference
    assert any(np.array_equal(ref[s:s + 2000].astype(np.float32),
                              batch.reference[0].numpy()) for s in starts)


def test_make_batch_enrollment_crop(samples):
    batch = make_batch(_pairs(samples)[:2], n_classes=4, enroll_crop=1600)
    assert batch.enrollment.shape == (2, 1600)


def test_make_batch_without_enrollment(samples):
    batch = make_batch(_pairs(samples)[:2], n_classes=4, with_enrollment=False)
    assert batch.enrollment is None


# ------------------------------------------------------------ one step


def test_multitask_step_blends_both_paths(samples):
    sys = _fresh_system(0)
    batch = make_batch(_pairs(samples)[:2], n_classes=4, crop_len=2000,
                       rng=np.random.default_rng(1))
    opt = torch.optim.Adam(sys.trainable_parameters(), lr=1e-4)
    stats = multitask_step(sys, batch, opt, alpha=0.5)
    assert stats["label_loss"] is not None and stats["enroll_loss"] is not None
    blended = 0.5 * stats["label_loss"] + 0.5 * stats["enroll_loss"]
    assert math.isclose(stats["loss"], blended, abs_tol=1e-6)
    assert stats["grad_norm"] >= 0.0


def test_multitask_step_alpha_endpoints(samples):
    batch = make_batch(_pairs(samples)[:2], n_classes=4, crop_len=2000,
                       rng=np.random.default_rng(2))
    sys = _fresh_system(1)
    opt = torch.optim.Adam(sys.trainable_parameters(), lr=1e-4)
    only_label = multitask_step(sys, batch, opt, alpha=1.0)
    assert only_label["enroll_loss"] is None
    assert math.isclose(only_label["loss"], only_label["label_loss"],
                        abs_tol=1e-6)
    only_enroll = multitask_step(sys, batch, opt, alpha=0.0)
    assert only_enroll["label_loss"] is None


def test_multitask_step_requires_enrollment_when_active(samples):
    sys = _fresh_system(2)
    batch = make_batch(_pairs(samples)[:1], n_classes=4, crop_len=2000,
                       rng=np.random.default_rng(3), with_enrollment=False)
    opt = torch.optim.Adam(sys.trainable_parameters(), lr=1e-4)
    with pytest.raises(ValueError, match="enrollment"):
        multitask_step(sys, batch, opt, alpha=0.5)
    # label-only training is fine without enrollments
    multitask_step(sys, batch, opt, alpha=1.0)


def test_multitask_step_updates_parameters(samples):
    sys = _fresh_system(3)
    batch = make_batch(_pairs(samples)[:1], n_classes=4, crop_len=2000,
                       rng=np.random.default_rng(4))
    before = [p.detach().clone() for p in sys.trainable_parameters()]
    opt = torch.optim.Adam(sys.trainable_parameters(), lr=1e-3)
    multitask_step(sys, batch, opt, alpha=1.0)
    changed = sum(not torch.equal(b, p.detach())
                  for b, p in zip(before, sys.trainable_parameters()))
    assert changed > 0


def test_alternation_picks_one_path_per_step(samples):
    sys = _fresh_system(4)
    batch = make_batch(_pairs(samples)[:1], n_classes=4, crop_len=2000,
                       rng=np.random.default_rng(5))
    opt = torch.optim.Adam(sys.trainable_parameters(), lr=1e-4)
    rng = np.random.default_rng(6)
    seen = set()
    for _ in range(6):
        stats = multitask_step(sys, batch, opt, alpha=0.5, alternate=True,
                               step_rng=rng)
        active = [k for k in ("label_loss", "enroll_loss")
                  if stats[k] is not None]
        assert len(active) == 1
        seen.add(active[0])
    assert seen == {"label_loss", "enroll_loss"}  # both paths get sampled


# ------------------------------------------------------------------ fit


def _quick_cfg(**kw):
    base = dict(steps=4, batch_size=2, lr=1e-3, val_every=2, seed=0,
                crop_len=2000, enroll_crop=1600, alpha=1.0)
    base.update(kw)
    return RunConfig(**base)


def test_fit_is_deterministic_per_seed(samples):
    results = []
    for _ in range(2):
        sys = _fresh_system(7)
        res = fit(sys, samples[:2], samples[2:], _quick_cfg())
        results.append([r["loss"] for r in res.history])
    assert np.allclose(results[0], results[1], atol=1e-6)


def test_fit_seed_changes_trajectory(samples):
    losses = []
    for seed in (0, 1):
        sys = _fresh_system(8)
        res = fit(sys, samples[:2], samples[2:], _quick_cfg(seed=seed))
        losses.append([r["loss"] for r in res.history])
    assert not np.allclose(losses[0], losses[1], atol=1e-6)


def test_fit_writes_jsonl_log_and_checkpoint(samples, tmp_path):
    log = tmp_path / "run.jsonl"
    ckpt = tmp_path / "best.pt"
    sys = _fresh_system(9, "soundbeam-m2d-mix")
    cfg = _quick_cfg(steps=3, batch_size=1, crop_len=1600,
                     log_path=str(log), ckpt_path=str(ckpt))
    res = fit(sys, samples[:1], samples[1:2], cfg)

    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(records) == 3
    for rec in records:
        assert {"step", "loss", "grad_norm"} <= set(rec)
        # fused system: fusion layer weights are logged and stay a simplex
        assert math.isclose(sum(rec["aie_weights"]), 1.0, abs_tol=1e-6)

    payload = load_checkpoint(ckpt)
    assert "state_dict" in payload
    assert payload["extra"]["step"] == res.best_step
    assert math.isclose(payload["extra"]["val_si_snr"], res.best_val_si_snr,
                        rel_tol=1e-9)


def test_fit_tracks_best_validation(samples):
    sys = _fresh_system(10)
    res = fit(sys, samples[:2], samples[2:], _quick_cfg(steps=6, val_every=2))
    bests = [v["best"] for v in res.val_history]
    assert bests == sorted(bests)  # running maximum never decreases
    assert res.best_val_si_snr == max(v["val_si_snr"] for v in res.val_history)
    assert math.isfinite(res.final_loss)


def test_fit_keeps_frozen_encoder_bit_identical(samples):
    sys = _fresh_system(11, "waveformer-m2d-full")
    cfg = _quick_cfg(steps=2, batch_size=1, crop_len=1600)
    res = fit(sys, samples[:1], samples[1:2], cfg)
    assert res.m2d_checksum_before == res.m2d_checksum_after


def test_fit_aborts_on_divergence(samples, tmp_path):
    sys = _fresh_system(12)
    with torch.no_grad():
        next(iter(sys.core.parameters())).fill_(float("nan"))
    log = tmp_path / "diverged.jsonl"
    with pytest.raises(TrainingDiverged) as err:
        fit(sys, samples[:1], samples[1:2], _quick_cfg(log_path=str(log)))
    snap = err.value.snapshot
    assert snap["step"] == 0
    assert not math.isfinite(snap["stats"]["loss"])
    assert "param_norm" in snap
    lines = log.read_text().splitlines()
    assert "diverged" in json.loads(lines[-1])


def test_fit_rejects_empty_training_set(samples):
    with pytest.raises(ValueError, match="empty"):
        fit(_fresh_system(13), [], samples[2:], _quick_cfg())


def test_validate_si_snr_finite(samples):
    sys = _fresh_system(14)
    val = validate_si_snr(sys, samples[:1], alpha=0.5)
    assert math.isfinite(val)


def test_run_config_validation():
    with pytest.raises(ValueError, match="alpha"):
        RunConfig(alpha=1.5)
    with pytest.raises(ValueError, match="positive"):
        RunConfig(steps=0)


def test_short_overfit_improves_loss(samples):
    """A few dozen steps on one clip should already reduce the objective."""
    sys = _fresh_system(15)
    cfg = RunConfig(steps=30, batch_size=2, lr=2e-3, val_every=30, seed=3,
                    crop_len=4000, alpha=1.0)
    res = fit(sys, samples[:1], samples[:1], cfg)
    first = np.mean([r["loss"] for r in res.history[:5]])
    last = np.mean([r["loss"] for r in res.history[-5:]])
    assert last < first
