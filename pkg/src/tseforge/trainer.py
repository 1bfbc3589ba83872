"""Training loop: multitask clue conditioning, validation, checkpointing.

Each optimizer step evaluates the same mixtures through both clue paths —
class label and enrollment — and combines the two losses with the weight
alpha (an alternation mode that samples one path per step with probability
alpha sits behind a flag).  Validation tracks mean SI-SNR; the best-scoring
parameters are checkpointed.  Every step appends one JSON record (losses,
gradient norm, fusion layer weights) to the run log.  A non-finite loss
aborts immediately with a diagnostic snapshot.  The transformer encoder is
frozen by default and its parameter checksum is recorded so freezing is
verifiable after the fact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .losses import LossConfig, multitask_loss, pair_loss, si_snr_loss
from .systems import TSESystem


@dataclass
class RunConfig:
    steps: int = 200
    batch_size: int = 4
    lr: float = 5e-4
    clip_norm: float = 5.0
    alpha: float = 0.5               # label-path weight in the combined loss
    loss: LossConfig = field(default_factory=LossConfig)
    val_every: int = 50
    seed: int = 0
    crop_len: Optional[int] = None   # random training crop, samples
    enroll_crop: Optional[int] = None
    alternate_clues: bool = False    # sample one clue path per step
    log_path: Optional[str] = None
    ckpt_path: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainBatch:
    mixture: torch.Tensor            # [B, T]
    reference: torch.Tensor          # [B, T]
    one_hot: torch.Tensor            # [B, n_classes]
    enrollment: Optional[torch.Tensor]  # [B, T_e] or None


def make_batch(pairs, n_classes: int, crop_len: int = None,
               enroll_crop: int = None, rng: np.random.Generator = None,
               with_enrollment: bool = True) -> TrainBatch:
    """Assemble (MixtureSample, target_index) pairs into aligned tensors."""
    mixtures, refs, hots, enrolls = [], [], [], []
    for sample, t_idx in pairs:
        tgt = sample.targets[t_idx]
        mix, ref = sample.mixture, tgt.reference
        if crop_len is not None and crop_len < len(mix):
            start = int(rng.integers(0, len(mix) - crop_len + 1)) if rng is not None else 0
            mix, ref = mix[start:start + crop_len], ref[start:start + crop_len]
        mixtures.append(mix)
        refs.append(ref)
        hot = np.zeros(n_classes)
        hot[tgt.class_id] = 1.0
        hots.append(hot)
        if with_enrollment:
            enr = tgt.enrollment
            if enroll_crop is not None and enroll_crop < len(enr):
                enrolls.append(enr[:enroll_crop])
            else:
                enrolls.append(enr)
    to32 = lambda rows: torch.tensor(np.stack(rows), dtype=torch.float32)
    return TrainBatch(mixture=to32(mixtures), reference=to32(refs),
                      one_hot=to32(hots),
                      enrollment=to32(enrolls) if with_enrollment else None)


def _path_loss(system: TSESystem, batch: TrainBatch, kind: str,
               loss_cfg: LossConfig) -> torch.Tensor:
    if kind == "class_label":
        emb = system.embed_labels(batch.one_hot)
    else:
        emb = system.embed_enrollments(batch.enrollment)
    est = system(batch.mixture, emb)
    return pair_loss(est, batch.reference, loss_cfg)


def multitask_step(system: TSESystem, batch: TrainBatch,
                   optimizer: torch.optim.Optimizer,
                   loss_cfg: LossConfig = None, alpha: float = 0.5,
                   clip_norm: float = 5.0, alternate: bool = False,
                   step_rng: np.random.Generator = None) -> dict:
    """One optimizer update over both clue paths (or one, in alternation mode).

    Returns {"loss", "label_loss", "enroll_loss", "grad_norm"} as floats
    (inactive paths are None).
    """
    loss_cfg = loss_cfg or LossConfig()
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha < 1.0 and batch.enrollment is None:
        raise ValueError("alpha < 1 requires enrollment clues in the batch")

    label_loss = enroll_loss = None
    if alternate:
        r = step_rng.random() if step_rng is not None else 0.5
        if r < alpha:
            label_loss = _path_loss(system, batch, "class_label", loss_cfg)
            total = label_loss
        else:
            enroll_loss = _path_loss(system, batch, "enrollment", loss_cfg)
            total = enroll_loss
    else:
        zero = torch.zeros(())
        if alpha > 0.0:
            label_loss = _path_loss(system, batch, "class_label", loss_cfg)
        if alpha < 1.0:
            enroll_loss = _path_loss(system, batch, "enrollment", loss_cfg)
        total = multitask_loss(label_loss if label_loss is not None else zero,
                               enroll_loss if enroll_loss is not None else zero,
                               alpha)

    optimizer.zero_grad()
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(
        system.trainable_parameters(), clip_norm)
    optimizer.step()
    return {
        "loss": float(total.detach()),
        "label_loss": None if label_loss is None else float(label_loss.detach()),
        "enroll_loss": None if enroll_loss is None else float(enroll_loss.detach()),
        "grad_norm": float(grad_norm),
    }


@torch.no_grad()
def validate_si_snr(system: TSESystem, samples, alpha: float = 0.5,
                    max_items: int = None) -> float:
    """Mean SI-SNR (dB, higher better) over validation targets.

    Averages the clue paths that the training objective makes active.
    """
    system.eval()
    vals = []
    items = [(s, t) for s in samples for t in range(len(s.targets))]
    if max_items is not None:
        items = items[:max_items]
    for sample, t_idx in items:
        batch = make_batch([(sample, t_idx)], system.cfg.n_classes)
        per_path = []
        if alpha > 0.0:
            emb = system.embed_labels(batch.one_hot)
            est = system(batch.mixture, emb)
            per_path.append(-float(si_snr_loss(est, batch.reference)))
        if alpha < 1.0:
            emb = system.embed_enrollments(batch.enrollment)
            est = system(batch.mixture, emb)
            per_path.append(-float(si_snr_loss(est, batch.reference)))
        vals.append(sum(per_path) / len(per_path))
    system.train()
    return float(np.mean(vals))


@dataclass
class FitResult:
    best_val_si_snr: float
    best_step: int
    final_loss: float
    history: list                 # per-step log records
    val_history: list             # (step, val_si_snr, best_so_far)
    m2d_checksum_before: float
    m2d_checksum_after: float
    ckpt_path: Optional[str]


def fit(system: TSESystem, train_set, val_set, cfg: RunConfig,
        extra_configs: dict = None) -> FitResult:
    """Train on (MixtureSample, target) pairs drawn from train_set.

    Deterministic for a fixed (system init, cfg.seed).  The best validation
    SI-SNR is tracked as a running maximum — the retained checkpoint never
    gets worse — and is checkpointed when cfg.ckpt_path is set.
    extra_configs (e.g. {"system": ...}) are stored alongside the run config
    in every checkpoint so the model can be rebuilt from the file alone.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(system.trainable_parameters(), lr=cfg.lr)
    pool = [(s, t) for s in train_set for t in range(len(s.targets))]
    if not pool:
        raise ValueError("empty training set")

    sum_before = system.m2d_checksum()
    log_f = open(cfg.log_path, "w") if cfg.log_path else None
    history, val_history = [], []
    best_val, best_step = -math.inf, -1
    need_enroll = cfg.alpha < 1.0
    last = {"loss": math.nan}

    def run_validation(step):
        nonlocal best_val, best_step
        val = validate_si_snr(system, val_set, alpha=cfg.alpha)
        if val > best_val:
            best_val, best_step = val, step
            if cfg.ckpt_path:
                save_checkpoint(cfg.ckpt_path, system.state_dict(),
                                configs={"run": asdict(cfg), **(extra_configs or {})},
                                extra={"step": step, "val_si_snr": val})
        val_history.append({"step": step, "val_si_snr": val, "best": best_val})

    try:
        system.train()
        for step in range(cfg.steps):
            picks = rng.choice(len(pool), size=cfg.batch_size, replace=True)
            batch = make_batch([pool[i] for i in picks], system.cfg.n_classes,
                               crop_len=cfg.crop_len, enroll_crop=cfg.enroll_crop,
                               rng=rng, with_enrollment=need_enroll)
            stats = multitask_step(system, batch, optimizer, cfg.loss,
                                   alpha=cfg.alpha, clip_norm=cfg.clip_norm,
                                   alternate=cfg.alternate_clues, step_rng=rng)
            if not math.isfinite(stats["loss"]):
                snapshot = {"step": step, "stats": stats,
                            "recent": history[-5:],
                            "param_norm": float(sum(p.detach().norm() ** 2
                                                    for p in system.parameters()) ** 0.5)}
                if log_f:
                    log_f.write(json.dumps({"diverged": snapshot}) + "\n")
                raise TrainingDiverged(f"non-finite loss at step {step}", snapshot)
            record = {"step": step, **stats}
            if system.aie is not None:
                record["aie_weights"] = [round(w, 8) for w in
                                         system.aie.weights().detach().tolist()]
            history.append(record)
            last = stats
            if log_f:
                log_f.write(json.dumps(record) + "\n")
            if (step + 1) % cfg.val_every == 0:
                run_validation(step)
        if not val_history or val_history[-1]["step"] != cfg.steps - 1:
            run_validation(cfg.steps - 1)
    finally:
        if log_f:
            log_f.close()

    system.eval()
    return FitResult(best_val_si_snr=best_val, best_step=best_step,
                     final_loss=last["loss"], history=history,
                     val_history=val_history,
                     m2d_checksum_before=sum_before,
                     m2d_checksum_after=system.m2d_checksum(),
                     ckpt_path=cfg.ckpt_path)
