"""Miniature ViT-style audio encoder with per-layer feature taps.

Log-mel input is cut into (80 mels x 2 frames) patches by a 2-D conv, giving
50 tokens per second.  A CLS token is prepended before block 1.  The encoder
exposes the full layer stack rather than a single output:

  Z_0             conv patch-embed output, [n_tokens, D]      (no CLS)
  Z_1 .. Z_N      transformer block outputs, [n_tokens+1, D]  (CLS at row 0)

Two modes share one parameter set:

  offline   bidirectional attention + ordinary layer norm;
  causal    lower-triangular attention (CLS at position 0 is visible to all
            queries and attends only to itself) + cumulative layer norm whose
            statistics at row t cover all feature entries of rows <= t.

Switching modes changes no parameter values, so an offline-trained encoder
can be re-run causally as-is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .signal_core import MelSpectrogram

MODES = ("offline", "causal")


@dataclass
class EncoderConfig:
    n_blocks: int = 2
    model_dim: int = 64
    n_heads: int = 4
    n_mels: int = 80
    patch_frames: int = 2
    mlp_ratio: float = 4.0
    mode: str = "offline"

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.patch_frames < 1:
            raise ValueError("patch_frames must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class FeatureStack:
    """Per-layer encoder features, layers[0] = Z_0 (one row shorter, no CLS)."""

    layers: list

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("feature stack is empty")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def aligned(self) -> bool:
        rows = {z.shape[-2] for z in self.layers}
        return len(rows) == 1

    def validate(self):
        for z in self.layers:
            if not torch.all(torch.isfinite(z)):
                raise ValueError("feature stack contains non-finite values")
        if len(self.layers) > 1:
            rows = [z.shape[-2] for z in self.layers]
            if any(r != rows[1] for r in rows[1:]):
                raise ValueError(f"CLS-bearing layers disagree on length: {rows[1:]}")
            if rows[0] not in (rows[1] - 1, rows[1]):
                raise ValueError(f"Z_0 must have one fewer row than Z_1 (or equal after padding), got {rows}")
        return self


def causal_attention_mask(n_tokens: int) -> torch.Tensor:
    """Boolean [n, n] mask, True where key k may be seen by query q (k <= q).

    Row 0 (CLS) attends only to itself and is visible to every later query —
    both already implied by the lower triangle.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    return torch.tril(torch.ones(n_tokens, n_tokens, dtype=torch.bool))


def cumulative_layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
                          eps: float = 1e-5) -> torch.Tensor:
    """Layer norm whose row-t statistics cover all D*(t+1) entries of rows <= t.

    Row 0 is identical to ordinary layer norm on that row.  x is [..., T, D].
    """
    d = x.shape[-1]
    counts = d * torch.arange(1, x.shape[-2] + 1, dtype=x.dtype, device=x.device)
    counts = counts.view(*([1] * (x.dim() - 2)), -1, 1)  # [..., T, 1]
    csum = torch.cumsum(x.sum(dim=-1, keepdim=True), dim=-2)        # [..., T, 1]
    csumsq = torch.cumsum((x * x).sum(dim=-1, keepdim=True), dim=-2)
    mean = csum / counts
    var = torch.clamp(csumsq / counts - mean * mean, min=0.0)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def sinusoidal_positions(n: int, dim: int, device=None) -> torch.Tensor:
    """Fixed sin/cos position table, [n, dim]."""
    pos = torch.arange(n, dtype=torch.float32, device=device).unsqueeze(1)
    half = torch.arange(dim // 2, dtype=torch.float32, device=device)
    freq = torch.exp(-math.log(10000.0) * 2 * half / dim)
    table = torch.zeros(n, dim, device=device)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, causal=False):
        # x: [B, T, D]
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)  # [B, H, T, hd]
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        logits = (q @ k.transpose(-2, -1)) * self.scale  # [B, H, T, T]
        if causal:
            mask = causal_attention_mask(t).to(x.device)
            logits = logits.masked_fill(~mask, float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v  # [B, H, T, hd]
        out = out.transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block; norms switch between LN and cumulative LN."""

    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _norm(self, ln, x, causal):
        if causal:
            return cumulative_layer_norm(x, ln.weight, ln.bias, ln.eps)
        return ln(x)

    def forward(self, x, causal=False):
        x = x + self.attn(self._norm(self.norm1, x, causal), causal=causal)
        x = x + self.mlp(self._norm(self.norm2, x, causal))
        return x


class M2DEncoder(nn.Module):
    """Patch-embed + transformer stack returning every layer's output."""

    def __init__(self, cfg: EncoderConfig = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        c = self.cfg
        self.patch_embed = nn.Conv2d(1, c.model_dim, kernel_size=(c.n_mels, c.patch_frames),
                                     stride=(c.n_mels, c.patch_frames))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.model_dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            Block(c.model_dim, c.n_heads, c.mlp_ratio) for _ in range(c.n_blocks))

    def patchify(self, mel: torch.Tensor) -> torch.Tensor:
        """[B, n_mels, F] -> [B, floor(F / patch_frames), D]; odd trailing frames drop."""
        if mel.shape[-2] != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {mel.shape[-2]}")
        if mel.shape[-1] < self.cfg.patch_frames:
            raise ValueError("input too short for one patch")
        x = self.patch_embed(mel.unsqueeze(1))  # [B, D, 1, n_tokens]
        return x.squeeze(2).transpose(1, 2)     # [B, n_tokens, D]

    def forward(self, mel, mode: str = None) -> FeatureStack:
        """Encode a mel array ([n_mels, F] or [B, n_mels, F]) into a FeatureStack."""
        if mode is None:
            mode = self.cfg.mode
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        causal = mode == "causal"

        if isinstance(mel, MelSpectrogram):
            mel = mel.values
        if isinstance(mel, np.ndarray):
            mel = torch.from_numpy(mel)
        mel = mel.to(torch.float32)
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)

        z0 = self.patchify(mel)  # [B, n_tokens, D]
        b, n, d = z0.shape
        x = z0 + sinusoidal_positions(n, d, z0.device)
        x = torch.cat([self.cls_token.expand(b, 1, d), x], dim=1)  # [B, n_tokens+1, D]

        layers = [z0]
        for blk in self.blocks:
            x = blk(x, causal=causal)
            layers.append(x)
        if squeeze:
            layers = [z.squeeze(0) for z in layers]
        return FeatureStack(layers=layers)

    def new_stream(self) -> "CausalEncoderStream":
        return CausalEncoderStream(self)


class _CLNState:
    """Running count / sum / sum-of-squares for one cumulative-norm site."""

    def __init__(self):
        self.count = 0.0
        self.sum = 0.0
        self.sumsq = 0.0

    def normalize(self, x: torch.Tensor, ln: nn.LayerNorm) -> torch.Tensor:
        # x: [m, D] new rows, oldest first
        d = x.shape[-1]
        counts = self.count + d * torch.arange(1, x.shape[0] + 1, dtype=x.dtype).unsqueeze(1)
        csum = self.sum + torch.cumsum(x.sum(-1, keepdim=True), dim=0)
        csumsq = self.sumsq + torch.cumsum((x * x).sum(-1, keepdim=True), dim=0)
        mean = csum / counts
        var = torch.clamp(csumsq / counts - mean * mean, min=0.0)
        out = (x - mean) / torch.sqrt(var + ln.eps) * ln.weight + ln.bias
        self.count = float(counts[-1, 0])
        self.sum = csum[-1, 0].item()
        self.sumsq = csumsq[-1, 0].item()
        return out


class CausalEncoderStream:
    """Incremental causal encoding that matches forward(mode="causal") row-for-row.

    Carries per-block KV caches and cumulative-norm statistics.  The CLS row
    is pushed once at construction; afterwards push() consumes patch tokens
    (Z_0 rows, pre-position) and returns the new row of every layer, shaped
    [n_layers][n_new, D] with layer 0 = the raw tokens themselves.
    """

    def __init__(self, enc: M2DEncoder):
        self.enc = enc
        self.n_tokens = 0
        self._state = [dict(k=None, v=None, n1=_CLNState(), n2=_CLNState())
                       for _ in enc.blocks]
        d = enc.cfg.model_dim
        self._cls_rows = self._run_blocks(enc.cls_token.view(1, d))

    def _attend(self, blk, st, x_norm):
        a = blk.attn
        m = x_norm.shape[0]
        q, k, v = a.qkv(x_norm).chunk(3, dim=-1)
        st["k"] = k if st["k"] is None else torch.cat([st["k"], k], dim=0)
        st["v"] = v if st["v"] is None else torch.cat([st["v"], v], dim=0)
        kk, vv = st["k"], st["v"]  # [T_total, D]
        t_total = kk.shape[0]
        hd, h = a.head_dim, a.n_heads
        qh = q.view(m, h, hd).transpose(0, 1)                      # [H, m, hd]
        kh = kk.view(t_total, h, hd).transpose(0, 1)               # [H, T, hd]
        vh = vv.view(t_total, h, hd).transpose(0, 1)
        logits = (qh @ kh.transpose(-2, -1)) * a.scale             # [H, m, T]
        # query at global position (t_total - m + i) sees keys <= that position
        qpos = torch.arange(t_total - m, t_total).unsqueeze(1)
        kpos = torch.arange(t_total).unsqueeze(0)
        logits = logits.masked_fill((kpos > qpos).unsqueeze(0), float("-inf"))
        out = (torch.softmax(logits, dim=-1) @ vh).transpose(0, 1).reshape(m, h * hd)
        return a.proj(out)

    def _run_blocks(self, rows: torch.Tensor) -> list:
        outs = []
        x = rows
        for blk, st in zip(self.enc.blocks, self._state):
            x = x + self._attend(blk, st, st["n1"].normalize(x, blk.norm1))
            x = x + blk.mlp(st["n2"].normalize(x, blk.norm2))
            outs.append(x)
        return outs

    @torch.no_grad()
    def push(self, tokens: torch.Tensor) -> list:
        """tokens: [n_new, D] patch-embed rows; returns [Z_0 rows, Z_1 rows, ...]."""
        if tokens.numel() == 0:
            return [tokens] * (len(self.enc.blocks) + 1)
        d = self.enc.cfg.model_dim
        pos = sinusoidal_positions(self.n_tokens + tokens.shape[0], d)[self.n_tokens:]
        self.n_tokens += tokens.shape[0]
        outs = self._run_blocks(tokens + pos)
        return [tokens] + outs

    @property
    def cls_rows(self) -> list:
        """Per-block CLS outputs, [n_blocks][1, D] (fixed for the whole stream)."""
        return self._cls_rows
