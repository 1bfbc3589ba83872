"""Adaptive Input Enhancer: fuse the encoder layer stack into an extractor.

Pipeline:  align_cls_pad -> softmax-weighted convex layer sum -> transposed-conv
upsampling to the extractor's frame rate -> tail trim / zero-pad -> channel
concat with the encoded mixture (optional 1x1 bottleneck after the concat).

The layer weights live on a simplex (softmax of learned logits, sum 1); a hard
one-hot override hook exists so tests can pin the sum to a single layer.

Upsampling presets (kernel, stride), both with stride product 40 — tokens at
50/s reach 2000/s, the 16-kHz-over-stride-8 frame rate:

  DECONV_SOUNDBEAM   [(2, 2), (25, 20)]
  DECONV_WAVEFORMER  [(2, 2), (2, 2), (2, 2), (1, 5)] + 1x1 bottleneck

The Waveformer consumes frames at 500/s; the rate mismatch is resolved by the
tail-trim rule (the upsampled stream is cut to the encoded-mixture length, the
mixture branch is never touched) and both lengths are reported by the module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .m2d import FeatureStack

DECONV_SOUNDBEAM = ((2, 2), (25, 20))
DECONV_WAVEFORMER = ((2, 2), (2, 2), (2, 2), (1, 5))


@dataclass
class AIEConfig:
    deconv_spec: tuple = DECONV_SOUNDBEAM
    in_dim: int = 64          # encoder model_dim
    width: int = 256          # deconv output channels
    use_bias: bool = False
    bottleneck: bool = False  # 1x1 conv after the concat (Waveformer preset)

    def __post_init__(self):
        self.deconv_spec = tuple(tuple(ks) for ks in self.deconv_spec)
        for k, s in self.deconv_spec:
            if k < 1 or s < 1:
                raise ValueError(f"bad deconv spec entry {(k, s)}")
        if not self.deconv_spec:
            raise ValueError("deconv_spec is empty")


def upsampled_length(n_rows: int, deconv_spec) -> int:
    """Output length of the transposed-conv cascade: n -> (n-1)*s + k per layer."""
    n = n_rows
    for k, s in deconv_spec:
        n = (n - 1) * s + k
    return n


def align_cls_pad(stack: FeatureStack) -> FeatureStack:
    """Prepend one zero row to Z_0 so every layer matches the CLS-bearing length.

    A stack whose layers already share one length is returned unchanged.
    """
    if len(stack.layers) == 0:
        raise ValueError("feature stack is empty")
    if stack.aligned:
        return stack
    rows = [z.shape[-2] for z in stack.layers]
    target = rows[1]
    if any(r != target for r in rows[1:]) or rows[0] != target - 1:
        raise ValueError(f"cannot align stack with layer lengths {rows}")
    z0 = stack.layers[0]
    pad = torch.zeros(*z0.shape[:-2], 1, z0.shape[-1], dtype=z0.dtype, device=z0.device)
    return FeatureStack(layers=[torch.cat([pad, z0], dim=-2)] + list(stack.layers[1:]))


def weighted_sum(layers, weights: torch.Tensor) -> torch.Tensor:
    """Convex combination sum_i w_i * Z_i over an aligned layer list."""
    if len(layers) != weights.shape[0]:
        raise ValueError(f"{len(layers)} layers vs {weights.shape[0]} weights")
    out = layers[0] * weights[0]
    for z, w in zip(layers[1:], weights[1:]):
        out = out + z * w
    return out


class AdaptiveInputEnhancer(nn.Module):
    def __init__(self, n_layers: int, cfg: AIEConfig = None, mix_dim: int = None):
        """mix_dim: encoded-mixture channel count, required when cfg.bottleneck."""
        super().__init__()
        self.cfg = cfg or AIEConfig()
        self.n_layers = n_layers
        self.layer_logits = nn.Parameter(torch.zeros(n_layers))
        self.layer_weight_override = None  # int index -> hard one-hot

        deconvs = []
        in_ch = self.cfg.in_dim
        for k, s in self.cfg.deconv_spec:
            deconvs.append(nn.ConvTranspose1d(in_ch, self.cfg.width, k, stride=s,
                                              bias=self.cfg.use_bias))
            in_ch = self.cfg.width
        self.deconvs = nn.ModuleList(deconvs)

        self.bottleneck = None
        if self.cfg.bottleneck:
            if mix_dim is None:
                raise ValueError("bottleneck requires mix_dim")
            self.bottleneck = nn.Conv1d(mix_dim + self.cfg.width, mix_dim, 1,
                                        bias=self.cfg.use_bias)
        self.last_lengths = None  # (upsampled, mixture) from the latest fuse

    def weights(self) -> torch.Tensor:
        """Simplex layer weights; the override pins an exact one-hot."""
        if self.layer_weight_override is not None:
            w = torch.zeros_like(self.layer_logits)
            w[self.layer_weight_override] = 1.0
            return w
        return torch.softmax(self.layer_logits, dim=0)

    def weighted_sum(self, stack: FeatureStack) -> torch.Tensor:
        stack = align_cls_pad(stack)
        return weighted_sum(stack.layers, self.weights())

    def upsample(self, z: torch.Tensor) -> torch.Tensor:
        """[..., T, D] token-rate features -> [..., U, width] at the upsampled rate."""
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        x = z.transpose(1, 2)  # [B, D, T]
        for dc in self.deconvs:
            x = dc(x)
        x = x.transpose(1, 2)  # [B, U, width]
        return x.squeeze(0) if squeeze else x

    def fuse(self, y: torch.Tensor, y_m2d: torch.Tensor) -> torch.Tensor:
        """Concat [..., T', C] mixture features with tail-adjusted m2d features.

        y_m2d is trimmed or zero-padded at the tail to T'; y is never altered.
        """
        squeeze = y.dim() == 2
        if squeeze:
            y, y_m2d = y.unsqueeze(0), y_m2d.unsqueeze(0)
        t_mix = y.shape[1]
        u = y_m2d.shape[1]
        self.last_lengths = (u, t_mix)
        if u >= t_mix:
            y_m2d = y_m2d[:, :t_mix]
        else:
            pad = torch.zeros(y_m2d.shape[0], t_mix - u, y_m2d.shape[2],
                              dtype=y_m2d.dtype, device=y_m2d.device)
            y_m2d = torch.cat([y_m2d, pad], dim=1)
        fused = torch.cat([y, y_m2d], dim=2)
        if self.bottleneck is not None:
            fused = self.bottleneck(fused.transpose(1, 2)).transpose(1, 2)
        return fused.squeeze(0) if squeeze else fused

    def forward(self, y_ct: torch.Tensor, stack: FeatureStack) -> torch.Tensor:
        """Channel-first entry point: [B, C, T'] + stack -> [B, C_fused, T']."""
        z = self.weighted_sum(stack)
        if z.dim() == 2:
            z = z.unsqueeze(0)
        up = self.upsample(z)
        fused = self.fuse(y_ct.transpose(1, 2), up)
        return fused.transpose(1, 2)
