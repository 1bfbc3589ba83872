"""Target-clue encoders: every clue becomes one 256-dim conditioning vector.

Three routes into the shared embedding space:

  * class label      one-hot -> two FC layers, each with layer norm + ReLU;
  * enrollment, raw  conv block (kernel 40, stride 20, 256 channels) over the
                     waveform, then mean pooling over frames;
  * enrollment, M2D  multi-head factorized attentive (MHFA) pooling over the
                     offline encoder's layer stack: two softmax layer-weight
                     vectors build a key and a value stream, each of 8 heads
                     attends over time with its own query vector, and the
                     concatenated head outputs project linearly to 256.

The MHFA stack is CLS-aligned first (zero row prepended to Z_0); the CLS row
participates in pooling unless ``include_cls=False``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .aie import align_cls_pad
from .m2d import FeatureStack, M2DEncoder
from .signal_core import Waveform, logmel

EMBED_DIM = 256
CLUE_KINDS = ("class_label", "enrollment")


@dataclass
class ClueSpec:
    """One extraction request: exactly one clue, matching its declared kind."""

    kind: str
    label: Optional[np.ndarray] = None
    enrollment: Optional[Waveform] = None

    def __post_init__(self):
        if self.kind not in CLUE_KINDS:
            raise ValueError(f"kind must be one of {CLUE_KINDS}, got {self.kind!r}")
        if self.kind == "class_label":
            if self.label is None or self.enrollment is not None:
                raise ValueError("class_label clue must carry a label and nothing else")
        else:
            if self.enrollment is None or self.label is not None:
                raise ValueError("enrollment clue must carry a waveform and nothing else")


def validate_one_hot(label: np.ndarray, n_classes: int = None) -> np.ndarray:
    """Check an exact one-hot encoding: binary entries summing to one."""
    label = np.asarray(label, dtype=np.float64)
    if label.ndim != 1:
        raise ValueError(f"label must be 1-D, got shape {label.shape}")
    if n_classes is not None and label.shape[0] != n_classes:
        raise ValueError(f"label has {label.shape[0]} entries, expected {n_classes}")
    if not np.all((label == 0.0) | (label == 1.0)):
        raise ValueError("label entries must be exactly 0 or 1")
    if label.sum() != 1.0:
        raise ValueError(f"label must have exactly one hot entry, got sum {label.sum()}")
    return label


class LabelEncoder(nn.Module):
    """One-hot class label -> embedding: two FC layers with layer norm + ReLU."""

    def __init__(self, n_classes: int, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.n_classes = n_classes
        self.net = nn.Sequential(
            nn.Linear(n_classes, embed_dim), nn.LayerNorm(embed_dim), nn.ReLU(),
            nn.Linear(embed_dim, embed_dim), nn.LayerNorm(embed_dim), nn.ReLU(),
        )

    def forward(self, label: torch.Tensor) -> torch.Tensor:
        # [C] -> [E] or [B, C] -> [B, E]
        return self.net(label)

    def embed(self, label: np.ndarray) -> torch.Tensor:
        onehot = validate_one_hot(label, self.n_classes)
        return self(torch.from_numpy(onehot).float())


def conv_frame_count(n_samples: int, kernel: int = 40, stride: int = 20) -> int:
    """Valid-conv output length: floor((n - kernel) / stride) + 1."""
    if n_samples < kernel:
        raise ValueError(f"input too short: {n_samples} samples < kernel {kernel}")
    return (n_samples - kernel) // stride + 1


class ConvEnrollmentEncoder(nn.Module):
    """Enrollment waveform -> embedding via strided conv + mean pooling."""

    def __init__(self, embed_dim: int = EMBED_DIM, kernel: int = 40, stride: int = 20):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.conv = nn.Conv1d(1, embed_dim, kernel, stride)
        self.act = nn.PReLU()
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        # [T] -> [E] or [B, T] -> [B, E]
        squeeze = wave.dim() == 1
        if squeeze:
            wave = wave.unsqueeze(0)
        if wave.shape[-1] < self.kernel:
            raise ValueError(f"input too short: {wave.shape[-1]} samples < kernel {self.kernel}")
        x = self.conv(wave.unsqueeze(1))          # [B, E, frames]
        x = self.norm(self.act(x).transpose(1, 2))  # [B, frames, E]
        out = x.mean(dim=1)                       # [B, E]
        return out.squeeze(0) if squeeze else out

    def embed(self, w: Waveform) -> torch.Tensor:
        return self(torch.from_numpy(w.samples).float())


class MHFAPool(nn.Module):
    """Factorized attentive pooling over an aligned encoder layer stack."""

    def __init__(self, n_layers: int, model_dim: int, n_heads: int = 8,
                 embed_dim: int = EMBED_DIM, include_cls: bool = True):
        super().__init__()
        if model_dim % n_heads != 0:
            raise ValueError(f"model_dim {model_dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.include_cls = include_cls
        self.lambda_k = nn.Parameter(torch.zeros(n_layers))
        self.lambda_v = nn.Parameter(torch.zeros(n_layers))
        self.head_queries = nn.Parameter(torch.empty(n_heads, model_dim))
        nn.init.normal_(self.head_queries, std=model_dim ** -0.5)
        self.proj = nn.Linear(model_dim, embed_dim)
        self.layer_weight_override = None  # (k_idx, v_idx) -> hard one-hots

    def stream_weights(self):
        if self.layer_weight_override is not None:
            k_idx, v_idx = self.layer_weight_override
            w_k = torch.zeros_like(self.lambda_k)
            w_v = torch.zeros_like(self.lambda_v)
            w_k[k_idx], w_v[v_idx] = 1.0, 1.0
            return w_k, w_v
        return torch.softmax(self.lambda_k, dim=0), torch.softmax(self.lambda_v, dim=0)

    def mix_streams(self, layers):
        """Aligned layers -> (K, V) weighted sums, each [..., T, D]."""
        w_k, w_v = self.stream_weights()
        stacked = torch.stack(list(layers), dim=0)  # [L, ..., T, D]
        shape = (-1,) + (1,) * (stacked.dim() - 1)
        k = (stacked * w_k.view(shape)).sum(0)
        v = (stacked * w_v.view(shape)).sum(0)
        return k, v

    def forward(self, stack: FeatureStack, time_mask: torch.Tensor = None) -> torch.Tensor:
        """stack layers [T, D] or [B, T, D] -> [E] or [B, E].

        time_mask: optional bool [T] / [B, T]; False positions get -inf
        attention logits, so appending masked steps cannot change the output.
        """
        stack = align_cls_pad(stack)
        layers = stack.layers
        if not self.include_cls:
            layers = [z[..., 1:, :] for z in layers]
            if time_mask is not None:
                time_mask = time_mask[..., 1:]
        squeeze = layers[0].dim() == 2
        if squeeze:
            layers = [z.unsqueeze(0) for z in layers]
            if time_mask is not None:
                time_mask = time_mask.unsqueeze(0)
        if layers[0].shape[1] < 1:
            raise ValueError("stack has no time steps to pool")

        k, v = self.mix_streams(layers)         # [B, T, D]
        b, t, d = k.shape
        logits = torch.einsum("btd,hd->bht", k, self.head_queries)  # [B, H, T]
        if time_mask is not None:
            logits = logits.masked_fill(~time_mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(logits, dim=-1)    # [B, H, T]
        v_heads = v.view(b, t, self.n_heads, self.head_dim).permute(0, 2, 1, 3)
        pooled = (attn.unsqueeze(-1) * v_heads).sum(dim=2)  # [B, H, head_dim]
        out = self.proj(pooled.reshape(b, d))   # [B, E]
        return out.squeeze(0) if squeeze else out


class MHFAEnrollmentEncoder(nn.Module):
    """Enrollment waveform -> offline encoder stack -> MHFA embedding.

    Enrollments always go through the offline (bidirectional) encoder mode,
    even inside otherwise causal systems: enrollment is an offline artifact.
    """

    def __init__(self, encoder: M2DEncoder, n_heads: int = 8,
                 embed_dim: int = EMBED_DIM, include_cls: bool = True):
        super().__init__()
        self.encoder = encoder
        self.pool = MHFAPool(encoder.cfg.n_blocks + 1, encoder.cfg.model_dim,
                             n_heads, embed_dim, include_cls)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        stack = self.encoder(mel, mode="offline")
        return self.pool(stack)

    def embed(self, w: Waveform) -> torch.Tensor:
        return self(torch.from_numpy(logmel(w).values).float())
