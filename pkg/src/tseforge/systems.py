"""Assembled extraction systems: backbone x clue encoders x feature fusion.

A TSESystem bundles one extractor backbone (offline masking net or causal
online net) with a label encoder, an enrollment encoder, and optionally a
transformer audio encoder used two ways:

  * enrollment side — attentive pooling over the layer stack replaces the
    plain conv enrollment encoder;
  * mixture side — the layer stack is upsampled and fused into the
    extractor's mask input.

That 2x2 design (enrollment path on/off, mixture path on/off) per backbone
gives the eight named presets.  The transformer is frozen by default and
shared between both uses.  Enrollments always run the offline encoder mode;
the mixture stack is offline for the offline backbone and causal for the
online one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .aie import DECONV_SOUNDBEAM, DECONV_WAVEFORMER, AdaptiveInputEnhancer, AIEConfig
from .clues import (
    EMBED_DIM,
    ClueSpec,
    ConvEnrollmentEncoder,
    LabelEncoder,
    MHFAEnrollmentEncoder,
)
from .m2d import EncoderConfig, M2DEncoder
from .signal_core import Waveform, logmel
from .soundbeam import SoundBeamConfig, SoundBeamExtractor
from .waveformer import WaveformerConfig, WaveformerExtractor, tse_forward_streaming

BACKBONES = ("soundbeam", "waveformer")


@dataclass
class SystemConfig:
    backbone: str = "soundbeam"
    m2d_enroll: bool = False    # attentive-pool enrollment encoder
    m2d_mixture: bool = False   # fuse mixture features into the mask input
    n_classes: int = 4
    aie_width: int = 256
    freeze_m2d: bool = True
    soundbeam: SoundBeamConfig = field(default_factory=SoundBeamConfig)
    waveformer: WaveformerConfig = field(default_factory=WaveformerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")

    @property
    def needs_m2d(self) -> bool:
        return self.m2d_enroll or self.m2d_mixture

    def to_dict(self) -> dict:
        """Plain-dict form suitable for JSON/YAML and checkpoint embedding."""
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SystemConfig":
        d = dict(d)
        d["soundbeam"] = SoundBeamConfig(**d.get("soundbeam", {}))
        d["waveformer"] = WaveformerConfig(**d.get("waveformer", {}))
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        return SystemConfig(**d)


class TSESystem(nn.Module):
    """One ready-to-train extraction system; see module docstring."""

    def __init__(self, cfg: SystemConfig = None):
        super().__init__()
        self.cfg = cfg or SystemConfig()
        c = self.cfg

        self.m2d = M2DEncoder(c.encoder) if c.needs_m2d else None
        if c.freeze_m2d and self.m2d is not None:
            for p in self.m2d.parameters():
                p.requires_grad_(False)

        self.label_encoder = LabelEncoder(c.n_classes)
        if c.m2d_enroll:
            self.enroll_encoder = MHFAEnrollmentEncoder(self.m2d)
        else:
            self.enroll_encoder = ConvEnrollmentEncoder()

        self.aie = None
        if c.backbone == "soundbeam":
            core_cfg = c.soundbeam
            if c.m2d_mixture:
                core_cfg = replace(core_cfg, fusion_width=c.aie_width)
                self.aie = AdaptiveInputEnhancer(
                    n_layers=c.encoder.n_blocks + 1,
                    cfg=AIEConfig(deconv_spec=DECONV_SOUNDBEAM,
                                  in_dim=c.encoder.model_dim, width=c.aie_width))
            self.core = SoundBeamExtractor(core_cfg)
        else:
            if c.m2d_mixture:
                self.aie = AdaptiveInputEnhancer(
                    n_layers=c.encoder.n_blocks + 1,
                    cfg=AIEConfig(deconv_spec=DECONV_WAVEFORMER,
                                  in_dim=c.encoder.model_dim, width=c.aie_width,
                                  bottleneck=True),
                    mix_dim=c.waveformer.enc_dim)
            self.core = WaveformerExtractor(c.waveformer)

    # ------------------------------------------------------------------ clues

    def embed_clue(self, clue: ClueSpec) -> torch.Tensor:
        if clue.kind == "class_label":
            return self.label_encoder.embed(clue.label)
        return self.enroll_encoder.embed(clue.enrollment)

    def embed_labels(self, one_hots: torch.Tensor) -> torch.Tensor:
        """[B, n_classes] float one-hots -> [B, E]."""
        return self.label_encoder(one_hots)

    def embed_enrollments(self, enrollments: torch.Tensor) -> torch.Tensor:
        """[B, T_e] waveform batch -> [B, E]."""
        if self.cfg.m2d_enroll:
            mels = np.stack([logmel(Waveform(samples=w)).values
                             for w in enrollments.detach().cpu().numpy().astype(np.float64)])
            return self.enroll_encoder(torch.tensor(mels, dtype=torch.float32))
        return self.enroll_encoder(enrollments.float())

    # ---------------------------------------------------------------- mixture

    def mixture_stack(self, x: torch.Tensor):
        """Feature stack for fusion, or None when fusion is off.

        x: [T] or [B, T].  The stack is offline for the offline backbone and
        causal (lower-triangular attention, cumulative norms) for the online
        one.
        """
        if not self.cfg.m2d_mixture:
            return None
        arr = x.detach().cpu().numpy().astype(np.float64)
        if arr.ndim == 1:
            arr = arr[None]
        mels = np.stack([logmel(Waveform(samples=w)).values for w in arr])
        mode = "offline" if self.cfg.backbone == "soundbeam" else "causal"
        return self.m2d(torch.tensor(mels, dtype=torch.float32), mode=mode)

    def forward(self, x: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        """Training-path forward: batched waveforms + precomputed embeddings."""
        stack = self.mixture_stack(x)
        return self.core(x, embedding, stack=stack, aie=self.aie)

    # -------------------------------------------------------------- inference

    @torch.no_grad()
    def tse_forward(self, x, clue: ClueSpec) -> Waveform:
        """Extract the clue's target from a mixture; length-preserving."""
        if isinstance(x, Waveform):
            x = x.samples
        xt = torch.as_tensor(np.asarray(x), dtype=torch.float32)
        emb = self.embed_clue(clue)
        est = self.core(xt, emb, stack=self.mixture_stack(xt), aie=self.aie)
        return Waveform(samples=est.detach().cpu().numpy().astype(np.float64))

    @torch.no_grad()
    def tse_forward_streaming(self, x, clue: ClueSpec, chunk: int) -> Waveform:
        """Chunked causal extraction (online backbone only)."""
        if self.cfg.backbone != "waveformer":
            raise ValueError("streaming inference requires the online backbone")
        if isinstance(x, Waveform):
            x = x.samples
        emb = self.embed_clue(clue)
        est = tse_forward_streaming(self.core, np.asarray(x), emb, chunk,
                                    m2d=self.m2d if self.cfg.m2d_mixture else None,
                                    aie=self.aie)
        return Waveform(samples=est.detach().cpu().numpy().astype(np.float64))

    # ------------------------------------------------------------------ misc

    def m2d_checksum(self) -> float:
        """Sum of all transformer parameters; 0.0 when the system has none."""
        if self.m2d is None:
            return 0.0
        return float(sum(p.double().sum() for p in self.m2d.parameters()))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# presets: the 2x2 grid per backbone, at desk-friendly widths

_TOY_SB = SoundBeamConfig(enc_dim=64, bottleneck_dim=32, hidden_dim=64,
                          skip_dim=32, n_blocks=6, n_repeats=2)
_TOY_WF = WaveformerConfig(enc_dim=64, n_dcc=8, n_heads=4, ffn_mult=2)


def _preset(backbone: str, enroll: bool, mixture: bool) -> SystemConfig:
    return SystemConfig(backbone=backbone, m2d_enroll=enroll, m2d_mixture=mixture,
                        aie_width=48, soundbeam=_TOY_SB, waveformer=_TOY_WF)


PRESETS = {
    "soundbeam-baseline":    lambda: _preset("soundbeam", False, False),
    "soundbeam-m2d-enroll":  lambda: _preset("soundbeam", True, False),
    "soundbeam-m2d-mix":     lambda: _preset("soundbeam", False, True),
    "soundbeam-m2d-full":    lambda: _preset("soundbeam", True, True),
    "waveformer-baseline":   lambda: _preset("waveformer", False, False),
    "waveformer-m2d-enroll": lambda: _preset("waveformer", True, False),
    "waveformer-m2d-mix":    lambda: _preset("waveformer", False, True),
    "waveformer-m2d-full":   lambda: _preset("waveformer", True, True),
}


def preset_config(name: str) -> SystemConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def build_system(cfg_or_name) -> TSESystem:
    """Build from a SystemConfig or a preset name."""
    if isinstance(cfg_or_name, str):
        return TSESystem(preset_config(cfg_or_name))
    return TSESystem(cfg_or_name)
