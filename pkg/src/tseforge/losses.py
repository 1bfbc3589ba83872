"""Negative-SNR training losses and the two-clue multitask combination.

Both losses are epsilon-bounded to ±60 dB with epsilon *relative* to the
signal powers, which keeps two exact properties testable:

  * si_snr_loss(c * est, ref) == si_snr_loss(est, ref) for any c > 0;
  * est == ref (or est == c * ref for the SI flavor) hits the -60 dB floor.

The multitask loss is affine in alpha: alpha * L(label path) +
(1 - alpha) * L(enrollment path), default alpha = 0.5; within each path SNR
and SI-SNR terms are weighted 0.5 / 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-6


@dataclass
class LossConfig:
    alpha: float = 0.5
    snr_weight: float = 0.5
    si_snr_weight: float = 0.5
    eps: float = EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def _flatten_pair(est: torch.Tensor, ref: torch.Tensor):
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: est {tuple(est.shape)} vs ref {tuple(ref.shape)}")
    if ref.numel() == 0:
        raise ValueError("empty reference")
    if est.dim() == 1:
        est, ref = est.unsqueeze(0), ref.unsqueeze(0)
    return est.flatten(1), ref.flatten(1)


def snr_loss(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """-10*log10(||ref||^2 / (||ref - est||^2 + eps*||ref||^2)), batch-averaged.

    est == ref gives the -10*log10(1/eps) = -60 dB floor; est == 0 gives ~0 dB.
    """
    est, ref = _flatten_pair(est, ref)
    p_ref = (ref * ref).sum(-1)
    p_err = ((ref - est) ** 2).sum(-1)
    return (-10.0 * torch.log10(p_ref / (p_err + eps * p_ref))).mean()


def si_snr_loss(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Scale-invariant negative SNR: project the zero-mean estimate onto the
    zero-mean reference; the residual is the error term.  Exactly invariant
    to positive rescaling of the estimate (epsilon scales with the estimate).
    """
    est, ref = _flatten_pair(est, ref)
    est = est - est.mean(-1, keepdim=True)
    ref = ref - ref.mean(-1, keepdim=True)
    dot = (est * ref).sum(-1, keepdim=True)
    s_target = dot / (ref * ref).sum(-1, keepdim=True) * ref
    e_noise = est - s_target
    p_s = (s_target * s_target).sum(-1)
    p_e = (e_noise * e_noise).sum(-1)
    q = p_s + p_e
    return (-10.0 * torch.log10((p_s + eps * q) / (p_e + eps * q))).mean()


def pair_loss(est: torch.Tensor, ref: torch.Tensor, cfg: LossConfig = None) -> torch.Tensor:
    """Weighted SNR + SI-SNR loss for one clue path."""
    cfg = cfg or LossConfig()
    return (cfg.snr_weight * snr_loss(est, ref, cfg.eps)
            + cfg.si_snr_weight * si_snr_loss(est, ref, cfg.eps))


def multitask_loss(loss_label: torch.Tensor, loss_enroll: torch.Tensor,
                   alpha: float = 0.5) -> torch.Tensor:
    """alpha * L(label path) + (1 - alpha) * L(enrollment path)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * loss_label + (1.0 - alpha) * loss_enroll
