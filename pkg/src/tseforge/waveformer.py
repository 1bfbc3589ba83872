"""Causal online extractor: strided conv encoder, dilated-causal-conv mask
estimator, attention mask decoder, and an exact chunked streaming session.

Geometry (defaults): encoder stride 32 samples with a kernel of 3x the stride,
so each frame's analysis window overhangs its own 32-sample block by 64
samples; the worst-case per-sample algorithmic lookahead is kernel-1 = 95
samples.  The mask net is 10 dilated causal conv layers (dilations 1..512,
receptive field 2047 frames) with multiplicative clue conditioning after the
first layer, finished by one causal 8-head self-attention block.  Mask frame t
depends only on encoded frames <= t.

StreamingSession reproduces the one-shot forward chunk by chunk: per-layer
conv ring buffers, attention KV caches, a decoder overlap-add tail, and — when
transformer-feature fusion is active — an incremental mel front-end plus a
causal encoder stream whose upsampled features are consumed one frame at a
time.  Raw samples are retained for the mel front-end (desk-scale
simplification); all per-layer state is receptive-field sized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal
import torch
from torch import nn

from .clues import EMBED_DIM
from .m2d import causal_attention_mask
from .signal_core import LOG_FLOOR, N_MELS, SAMPLE_RATE, mel_filterbank


@dataclass
class WaveformerConfig:
    enc_stride: int = 32
    enc_kernel: int = 96      # 3x stride, enforced
    enc_dim: int = 256
    n_dcc: int = 10
    dcc_kernel: int = 3
    n_heads: int = 8
    ffn_mult: int = 2
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.enc_kernel != 3 * self.enc_stride:
            raise ValueError(f"enc_kernel must be 3x enc_stride, got "
                             f"{self.enc_kernel} vs stride {self.enc_stride}")
        if self.enc_dim % self.n_heads:
            raise ValueError("enc_dim must divide evenly into heads")
        if self.n_dcc < 1:
            raise ValueError("need at least one dilated conv layer")

    @property
    def dilations(self) -> tuple:
        return tuple(2 ** i for i in range(self.n_dcc))

    @property
    def receptive_field_frames(self) -> int:
        """Frames seen by the dilated conv stack: 1 + sum (k-1)*d."""
        return 1 + sum((self.dcc_kernel - 1) * d for d in self.dilations)

    @property
    def lookahead_samples(self) -> int:
        """Worst-case future reach: output sample s uses inputs <= s + this."""
        return self.enc_kernel - 1


class DCCBlock(nn.Module):
    """Dilated causal conv + PReLU + per-frame channel norm, residual."""

    def __init__(self, dim: int, kernel: int, dilation: int):
        super().__init__()
        self.context = (kernel - 1) * dilation  # left-context frames
        self.conv = nn.Conv1d(dim, dim, kernel, dilation=dilation)
        self.act = nn.PReLU()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor = None):
        """x: [B, D, T]; ctx: carried left context or None (zeros).

        Returns (residual output, new context) — feed the context back in to
        continue the same sequence.
        """
        if ctx is None:
            ctx = x.new_zeros(x.shape[0], x.shape[1], self.context)
        full = torch.cat([ctx, x], dim=-1)
        h = self.conv(full)
        h = self.norm(self.act(h).transpose(1, 2)).transpose(1, 2)
        return x + h, full[..., -self.context:]


class MaskDecoder(nn.Module):
    """One causal self-attention block + FFN, projecting to a sigmoid mask."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int, out_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(),
                                 nn.Linear(ffn_mult * dim, dim))
        self.out = nn.Conv1d(dim, out_dim, 1)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
               q_offset: int) -> torch.Tensor:
        """Causal attention of m queries (global positions q_offset..) over
        the full key/value history [B, T, D]."""
        b, m, d = q.shape
        t = k.shape[1]
        h, hd = self.n_heads, self.head_dim
        qh = q.view(b, m, h, hd).transpose(1, 2)
        kh = k.view(b, t, h, hd).transpose(1, 2)
        vh = v.view(b, t, h, hd).transpose(1, 2)
        logits = (qh @ kh.transpose(-2, -1)) * self.scale  # [B, H, m, T]
        if m == t and q_offset == 0:
            allowed = causal_attention_mask(t)
        else:
            qpos = torch.arange(q_offset, q_offset + m).unsqueeze(1)
            allowed = torch.arange(t).unsqueeze(0) <= qpos
        logits = logits.masked_fill(~allowed.to(logits.device), float("-inf"))
        out = (torch.softmax(logits, dim=-1) @ vh).transpose(1, 2).reshape(b, m, d)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[B, T, D] -> mask [B, out_dim, T] in (0, 1)."""
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        x = x + self.attend(q, k, v, q_offset=0)
        x = x + self.ffn(self.norm2(x))
        return torch.sigmoid(self.out(x.transpose(1, 2)))


class WaveformerExtractor(nn.Module):
    """encode -> conditioned causal mask -> bias-free overlap-add decode."""

    def __init__(self, cfg: WaveformerConfig = None):
        super().__init__()
        self.cfg = cfg or WaveformerConfig()
        c = self.cfg
        self.encoder = nn.Conv1d(1, c.enc_dim, c.enc_kernel, stride=c.enc_stride)
        self.dcc = nn.ModuleList(DCCBlock(c.enc_dim, c.dcc_kernel, d)
                                 for d in c.dilations)
        self.clue_proj = nn.Linear(c.embed_dim, c.enc_dim)
        self.mask_dec = MaskDecoder(c.enc_dim, c.n_heads, c.ffn_mult, c.enc_dim)
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
        self.frame_count(xb.shape[-1])
        return torch.relu(self.encoder(xb))

    def dcc_mask(self, feats: torch.Tensor, embedding: torch.Tensor,
                 aux: torch.Tensor = None) -> torch.Tensor:
        """Mask from encoded frames; aux optionally replaces the mask-net
        input with already-fused features of the same width."""
        h = aux if aux is not None else feats
        if h.shape[1] != self.cfg.enc_dim:
            raise ValueError(f"mask input has {h.shape[1]} channels, "
                             f"expected {self.cfg.enc_dim}")
        if aux is not None and aux.shape[-1] != feats.shape[-1]:
            raise ValueError(f"fused length {aux.shape[-1]} != "
                             f"encoded length {feats.shape[-1]}")
        if embedding.dim() == 1:
            embedding = embedding.unsqueeze(0).expand(h.shape[0], -1)
        gate = self.clue_proj(embedding).unsqueeze(-1)
        for i, blk in enumerate(self.dcc):
            h, _ = blk(h)
            if i == 0:
                h = h * gate
        return self.mask_dec(h.transpose(1, 2))

    def decode(self, masked: torch.Tensor, n_samples: int) -> torch.Tensor:
        y = self.decoder(masked).squeeze(1)
        if y.shape[-1] >= n_samples:
            return y[..., :n_samples]
        return torch.nn.functional.pad(y, (0, n_samples - y.shape[-1]))

    def forward(self, x, embedding: torch.Tensor, stack=None, aie=None) -> torch.Tensor:
        """Full causal pass.  For fusion, pass a causal-mode feature stack."""
        xb, batched = self._as_batch(x)
        feats = self.encode(xb)
        aux = None
        if aie is not None:
            if stack is None:
                raise ValueError("feature fusion requires an encoder feature stack")
            aux = aie(feats, stack)
        if not torch.is_tensor(embedding):
            embedding = torch.as_tensor(embedding, dtype=torch.float32)
        m = self.dcc_mask(feats, embedding, aux=aux)
        est = self.decode(m * feats, xb.shape[-1])
        return est if batched else est.squeeze(0)


def dcc_receptive_field(kernel: int, dilations) -> int:
    """Frames covered by a stack of dilated convs: 1 + sum (k-1)*d."""
    return 1 + sum((kernel - 1) * d for d in dilations)


class _StreamingMel:
    """Incremental replication of the offline centered log-mel front-end.

    Frame m covers samples [160m - 200, 160m + 200); it is emitted as soon as
    the window's real samples exist (left edge via reflection), and the
    final right-reflected frames are produced by flush().
    """

    WIN, HOP = 400, 160

    def __init__(self):
        self.next_frame = 0
        self.fb_t = mel_filterbank().T
        self.window = scipy.signal.get_window("hann", self.WIN, fftbins=True)

    def _frame(self, x: np.ndarray, m: int) -> np.ndarray:
        half = self.WIN // 2
        start = m * self.HOP - half
        if start >= 0 and start + self.WIN <= len(x):
            w = x[start:start + self.WIN]
        else:
            padded = np.pad(x, (half, half), mode="reflect")
            w = padded[m * self.HOP: m * self.HOP + self.WIN]
        spec = np.fft.rfft(w * self.window, n=self.WIN)
        mel_power = (np.abs(spec) ** 2) @ self.fb_t
        return np.log(np.maximum(mel_power, LOG_FLOOR))

    def ready(self, n_samples: int) -> int:
        """Frames computable without right reflection given n_samples."""
        # frame m needs samples through 160m + 199; the left reflection of
        # frame 0 additionally needs sample 200
        if n_samples < self.WIN // 2 + 1:
            return 0
        return (n_samples - self.WIN // 2) // self.HOP + 1

    def advance(self, x: np.ndarray, upto: int) -> np.ndarray:
        """Emit frames [next_frame, upto) from the raw buffer, [m, n_mels]."""
        frames = [self._frame(x, m) for m in range(self.next_frame, upto)]
        self.next_frame = upto
        if not frames:
            return np.zeros((0, N_MELS))
        return np.stack(frames)

    def flush(self, x: np.ndarray) -> np.ndarray:
        """Remaining frames up to the offline count ceil(n / hop)."""
        total = -(-len(x) // self.HOP)
        return self.advance(x, max(total, self.next_frame))


class StreamingSession:
    """Stateful chunked inference matching the one-shot causal forward.

    push() accepts chunks whose length is a multiple of the encoder stride and
    returns every newly finalized output sample; flush() completes the
    utterance and pads the result to the exact input length.  One session per
    utterance; state is never shared.
    """

    def __init__(self, model: WaveformerExtractor, embedding, *,
                 m2d=None, aie=None):
        if (m2d is None) != (aie is None):
            raise ValueError("fused streaming needs both the feature encoder and the fusion module")
        self.model = model.eval()
        self.cfg = model.cfg
        self.fused = aie is not None
        self.aie = aie
        if not torch.is_tensor(embedding):
            embedding = torch.as_tensor(embedding, dtype=torch.float32)
        self.embedding = embedding.float().view(1, -1)

        self.raw = np.zeros(0, dtype=np.float64)
        self.frames_done = 0
        self.emitted = 0
        self.finished = False
        self.out_parts = []
        self.dcc_ctx = [None] * len(model.dcc)
        self.kv = {"k": None, "v": None}
        self.oa_tail = torch.zeros(self.cfg.enc_kernel - self.cfg.enc_stride)

        if self.fused:
            if aie.cfg.use_bias:
                raise ValueError("streaming fusion requires bias-free upsampling")
            self.mel = _StreamingMel()
            self.stream = m2d.new_stream()
            self.tokens_done = 0
            self._mel_pending = np.zeros((0, N_MELS))
            self.stride_product = 1
            for _, s in aie.cfg.deconv_spec:
                self.stride_product *= s
            self.m2d_steps = self._upsample_rows(self._aligned_row0())

    # ------------------------------------------------------------- fused path

    def _aligned_row0(self) -> torch.Tensor:
        """Weighted sum at aligned row 0: zero Z_0 pad + per-block CLS rows."""
        w = self.aie.weights()
        d = self.stream.enc.cfg.model_dim
        row = torch.zeros(1, d)
        for wi, cls in zip(w[1:], self.stream.cls_rows):
            row = row + wi * cls
        return row

    def _upsample_rows(self, rows: torch.Tensor) -> torch.Tensor:
        """Upsample token rows independently -> [n*stride_product, width].

        Valid because every preset layer has kernel <= stride: each upsampled
        step descends from exactly one token, so blocks never overlap and the
        per-row result equals the corresponding slice of the full cascade
        (gap positions are zero for bias-free deconvs).
        """
        blocks = []
        for r in range(rows.shape[0]):
            up = self.aie.upsample(rows[r:r + 1])          # [u_row, width]
            if up.shape[0] < self.stride_product:
                up = torch.nn.functional.pad(
                    up, (0, 0, 0, self.stride_product - up.shape[0]))
            blocks.append(up)
        if not blocks:
            return torch.zeros(0, self.aie.cfg.width)
        return torch.cat(blocks, dim=0)

    def _advance_m2d(self):
        n = len(self.raw)
        mel_upto = self.mel.ready(n)
        new = self.mel.advance(self.raw, mel_upto)
        self._push_mel_frames(new)

    def _push_mel_frames(self, mel_rows: np.ndarray):
        if mel_rows.shape[0]:
            self._mel_pending = np.concatenate([self._mel_pending, mel_rows])
        pend = self._mel_pending
        n_pairs = pend.shape[0] // 2
        if n_pairs == 0:
            return
        pairs, self._mel_pending = pend[:2 * n_pairs], pend[2 * n_pairs:]
        mel_t = torch.tensor(pairs.T, dtype=torch.float32)     # [n_mels, 2p]
        tokens = self.stream.enc.patchify(mel_t.unsqueeze(0)).squeeze(0)
        with torch.no_grad():
            layer_rows = self.stream.push(tokens)              # [L][p, D]
        w = self.aie.weights()
        mixed = layer_rows[0] * w[0]
        for z, wi in zip(layer_rows[1:], w[1:]):
            mixed = mixed + z * wi
        self.m2d_steps = torch.cat([self.m2d_steps, self._upsample_rows(mixed)])
        self.tokens_done += tokens.shape[0]

    # ------------------------------------------------------------ core engine

    @torch.no_grad()
    def _process_new_frames(self):
        c = self.cfg
        n = len(self.raw)
        avail = 0 if n < c.enc_kernel else (n - c.enc_kernel) // c.enc_stride + 1
        m = avail - self.frames_done
        if m <= 0:
            return torch.zeros(0)
        f0 = self.frames_done
        seg = self.raw[f0 * c.enc_stride: (avail - 1) * c.enc_stride + c.enc_kernel]
        x = torch.tensor(seg, dtype=torch.float32).view(1, 1, -1)
        feats = torch.relu(self.model.encoder(x))              # [1, D, m]

        h = feats
        if self.fused:
            if self.m2d_steps.shape[0] < avail:
                raise RuntimeError("fusion features fell behind the encoder; "
                                   "this indicates a framing bug")
            steps = self.m2d_steps[f0:avail].unsqueeze(0)      # [1, m, width]
            h = self.aie.fuse(feats.transpose(1, 2), steps).transpose(1, 2)

        gate = self.model.clue_proj(self.embedding).unsqueeze(-1)
        for i, blk in enumerate(self.model.dcc):
            h, self.dcc_ctx[i] = blk(h, self.dcc_ctx[i])
            if i == 0:
                h = h * gate

        dec = self.model.mask_dec
        q, k, v = dec.qkv(dec.norm1(h.transpose(1, 2))).chunk(3, dim=-1)
        self.kv["k"] = k if self.kv["k"] is None else torch.cat([self.kv["k"], k], dim=1)
        self.kv["v"] = v if self.kv["v"] is None else torch.cat([self.kv["v"], v], dim=1)
        ht = h.transpose(1, 2)
        ht = ht + dec.attend(q, self.kv["k"], self.kv["v"], q_offset=f0)
        ht = ht + dec.ffn(dec.norm2(ht))
        mask = torch.sigmoid(dec.out(ht.transpose(1, 2)))      # [1, D, m]

        piece = self.model.decoder(mask * feats).squeeze()     # 32(m-1)+96
        piece = torch.atleast_1d(piece)
        tail_len = c.enc_kernel - c.enc_stride
        piece = piece.clone()
        piece[:tail_len] += self.oa_tail
        emit = piece[:m * c.enc_stride]
        self.oa_tail = piece[m * c.enc_stride:]
        self.frames_done = avail
        self.emitted += emit.shape[0]
        return emit

    def push(self, chunk) -> torch.Tensor:
        """Feed a chunk (length a multiple of the stride); returns finalized samples."""
        if self.finished:
            raise RuntimeError("session already flushed; start a new one")
        chunk = np.asarray(chunk, dtype=np.float64).reshape(-1)
        if chunk.size % self.cfg.enc_stride:
            raise ValueError(f"chunk of {chunk.size} samples is not a multiple "
                             f"of the stride ({self.cfg.enc_stride})")
        if chunk.size == 0:
            return torch.zeros(0)
        self.raw = np.concatenate([self.raw, chunk])
        if self.fused:
            self._advance_m2d()
        return self._process_new_frames()

    @torch.no_grad()
    def flush(self) -> torch.Tensor:
        """Finish the utterance: right-edge features, overlap tail, exact length."""
        if self.finished:
            raise RuntimeError("session already flushed; start a new one")
        self.finished = True
        n = len(self.raw)
        if n < self.cfg.enc_kernel:
            raise ValueError(f"input of {n} samples is shorter than one "
                             f"encoder window ({self.cfg.enc_kernel})")
        if self.fused:
            self._push_mel_frames(self.mel.flush(self.raw))
        last = self._process_new_frames()
        remainder = n - self.emitted
        tail = self.oa_tail[:remainder]
        if tail.shape[0] < remainder:
            tail = torch.nn.functional.pad(tail, (0, remainder - tail.shape[0]))
        return torch.cat([last, tail])


def tse_forward_streaming(model: WaveformerExtractor, x, embedding,
                          chunk: int, m2d=None, aie=None) -> torch.Tensor:
    """Stream one utterance through a fresh session; output length == input.

    The sample count and the chunk size must both be multiples of the encoder
    stride (the chunk contract); any remainder is rejected, not dropped.
    """
    if chunk <= 0 or chunk % model.cfg.enc_stride:
        raise ValueError(f"chunk must be a positive multiple of the stride "
                         f"({model.cfg.enc_stride}), got {chunk}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    sess = StreamingSession(model, embedding, m2d=m2d, aie=aie)
    parts = [sess.push(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    parts.append(sess.flush())
    return torch.cat(parts)
