"""Offline time-domain extractor: masked encoder/decoder with a TCN mask net.

The mixture is framed by a strided 1-D conv encoder (ReLU-gated), a temporal
convolutional network estimates a sigmoid mask over those frames, and a
bias-free transposed conv resynthesizes the masked frames.  The target is
selected by a 256-dim clue embedding injected multiplicatively after the first
block of every TCN repeat.  An optional fusion stage concatenates upsampled
transformer features (see aie.py) onto the encoder output before masking,
widening the mask net's input — never the masked representation itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .clues import EMBED_DIM


@dataclass
class SoundBeamConfig:
    enc_dim: int = 512        # frame channels N
    enc_kernel: int = 16      # samples per frame window
    enc_stride: int = 8
    bottleneck_dim: int = 128
    hidden_dim: int = 512
    skip_dim: int = 128
    kernel: int = 3
    n_blocks: int = 8         # dilations 2**0 .. 2**(n_blocks-1) per repeat
    n_repeats: int = 3
    embed_dim: int = EMBED_DIM
    fusion_width: int = 0     # extra mask-input channels from feature fusion

    def __post_init__(self):
        if self.enc_kernel < self.enc_stride:
            raise ValueError("enc_kernel must be >= enc_stride")
        if self.fusion_width < 0:
            raise ValueError("fusion_width must be >= 0")

    @property
    def mask_in_dim(self) -> int:
        return self.enc_dim + self.fusion_width


class GlobalLayerNorm(nn.Module):
    """Normalize over channels and time jointly; per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps) * self.gain + self.bias


class TCNBlock(nn.Module):
    """1x1 -> depthwise dilated conv -> residual + skip, gLN throughout."""

    def __init__(self, bottleneck: int, hidden: int, skip: int,
                 kernel: int, dilation: int):
        super().__init__()
        self.expand = nn.Conv1d(bottleneck, hidden, 1)
        self.act1 = nn.PReLU()
        self.norm1 = GlobalLayerNorm(hidden)
        pad = (kernel - 1) * dilation // 2
        self.depthwise = nn.Conv1d(hidden, hidden, kernel, padding=pad,
                                   dilation=dilation, groups=hidden)
        self.act2 = nn.PReLU()
        self.norm2 = GlobalLayerNorm(hidden)
        self.res = nn.Conv1d(hidden, bottleneck, 1)
        self.skip = nn.Conv1d(hidden, skip, 1)

    def forward(self, x: torch.Tensor):
        h = self.norm1(self.act1(self.expand(x)))
        h = self.norm2(self.act2(self.depthwise(h)))
        return x + self.res(h), self.skip(h)


class MaskNet(nn.Module):
    """TCN mask estimator with per-repeat multiplicative clue conditioning."""

    def __init__(self, cfg: SoundBeamConfig):
        super().__init__()
        self.cfg = cfg
        self.input_norm = GlobalLayerNorm(cfg.mask_in_dim)
        self.input_proj = nn.Conv1d(cfg.mask_in_dim, cfg.bottleneck_dim, 1)
        self.blocks = nn.ModuleList()
        for _ in range(cfg.n_repeats):
            for b in range(cfg.n_blocks):
                self.blocks.append(TCNBlock(cfg.bottleneck_dim, cfg.hidden_dim,
                                            cfg.skip_dim, cfg.kernel, 2 ** b))
        self.clue_proj = nn.ModuleList(
            nn.Linear(cfg.embed_dim, cfg.bottleneck_dim)
            for _ in range(cfg.n_repeats))
        self.out_act = nn.PReLU()
        self.out_proj = nn.Conv1d(cfg.skip_dim, cfg.enc_dim, 1)

    def forward(self, feats: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if feats.shape[1] != self.cfg.mask_in_dim:
            raise ValueError(f"mask input has {feats.shape[1]} channels, "
                             f"expected {self.cfg.mask_in_dim}")
        if embedding.dim() == 1:
            embedding = embedding.unsqueeze(0).expand(feats.shape[0], -1)
        h = self.input_proj(self.input_norm(feats))
        skip_sum = None
        for i, block in enumerate(self.blocks):
            h, s = block(h)
            skip_sum = s if skip_sum is None else skip_sum + s
            repeat, pos = divmod(i, self.cfg.n_blocks)
            if pos == 0:  # clue gates the stream once per repeat
                gate = self.clue_proj[repeat](embedding).unsqueeze(-1)
                h = h * gate
        return torch.sigmoid(self.out_proj(self.out_act(skip_sum)))


class SoundBeamExtractor(nn.Module):
    """encode -> clue-conditioned mask -> bias-free overlap-add decode."""

    def __init__(self, cfg: SoundBeamConfig = None):
        super().__init__()
        self.cfg = cfg or SoundBeamConfig()
        c = self.cfg
        self.encoder = nn.Conv1d(1, c.enc_dim, c.enc_kernel, stride=c.enc_stride)
        self.mask_net = MaskNet(c)
        self.decoder = nn.ConvTranspose1d(c.enc_dim, 1, c.enc_kernel,
                                          stride=c.enc_stride, bias=False)

    @staticmethod
    def _as_batch(x) -> tuple:
        """-> ([B,1,T] float tensor, had_batch_dim)."""
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(x)
        x = x.float()
        if x.dim() == 1:
            return x.view(1, 1, -1), False
        if x.dim() == 2:
            return x.unsqueeze(1), True
        if x.dim() == 3 and x.shape[1] == 1:
            return x, True
        raise ValueError(f"expected [T], [B,T] or [B,1,T], got {tuple(x.shape)}")

    def frame_count(self, n_samples: int) -> int:
        c = self.cfg
        if n_samples < c.enc_kernel:
            raise ValueError(f"input of {n_samples} samples is shorter than "
                             f"one encoder window ({c.enc_kernel})")
        return (n_samples - c.enc_kernel) // c.enc_stride + 1

    def encode(self, x) -> torch.Tensor:
        xb, _ = self._as_batch(x)
        self.frame_count(xb.shape[-1])  # raises on too-short input
        return torch.relu(self.encoder(xb))

    def mask(self, feats: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        return self.mask_net(feats, embedding)

    def decode(self, masked: torch.Tensor, n_samples: int) -> torch.Tensor:
        y = self.decoder(masked).squeeze(1)
        if y.shape[-1] >= n_samples:
            return y[..., :n_samples]
        return torch.nn.functional.pad(y, (0, n_samples - y.shape[-1]))

    def forward(self, x, embedding: torch.Tensor, stack=None, aie=None) -> torch.Tensor:
        xb, batched = self._as_batch(x)
        feats = self.encode(xb)
        mask_in = feats
        if aie is not None:
            if stack is None:
                raise ValueError("feature fusion requires an encoder feature stack")
            mask_in = aie(feats, stack)
        if not torch.is_tensor(embedding):
            embedding = torch.as_tensor(embedding, dtype=torch.float32)
        m = self.mask(mask_in, embedding)
        est = self.decode(m * feats, xb.shape[-1])
        return est if batched else est.squeeze(0)


def tse_forward(model: SoundBeamExtractor, x, embedding, stack=None, aie=None):
    """Functional alias for the full extraction pass."""
    return model(x, embedding, stack=stack, aie=aie)
