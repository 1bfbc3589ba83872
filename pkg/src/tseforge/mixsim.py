"""Deterministic synthetic mixtures for training and evaluation.

A SourceBank holds parameterized class generators (tones, chirps, AM noise,
click trains); every emitted sample is a pure function of (bank, config,
seed).  A mixture holds 3–4 events of distinct classes over a colored-noise
background; exactly two events are flagged as extraction targets, each paired
with an enrollment synthesized from a *different* instance seed of the same
class (never the instance in the mixture).  Optional exponential-decay FIR
reverberation is applied per source, enrollments included.

Exact bookkeeping guarantees:

  * mixture == sum(event images) + background to float precision — the
    references are the post-reverb, post-gain, post-limiter images;
  * a final limiter rescales every component identically so all audio stays
    within [-1, 1], and the scale factor is recorded;
  * default gain ranges are calibrated so corpus-average snr(mixture, ref)
    sits at -0.4 dB.

When the TSEFORGE_CACHE environment variable points at a directory, realized
mixtures are memoized there keyed by (bank, config, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.signal

from .signal_core import SAMPLE_RATE, Waveform

MANIFEST_KIND = "tseforge-manifest-v1"
FAMILIES = ("tone", "chirp", "amnoise", "clicks")


@dataclass
class ClassSpec:
    class_id: int
    name: str
    family: str
    params: dict

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")


@dataclass
class SourceBank:
    classes: list

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def spec(self, class_id: int) -> ClassSpec:
        return self.classes[class_id]

    def to_dict(self) -> dict:
        return {"classes": [asdict(c) for c in self.classes]}

    @staticmethod
    def from_dict(d: dict) -> "SourceBank":
        return SourceBank(classes=[ClassSpec(**c) for c in d["classes"]])


def default_bank(n_classes: int = 4) -> SourceBank:
    """Bank of synthetic classes cycling the four families across frequency."""
    classes = []
    for i in range(n_classes):
        family = FAMILIES[i % 4]
        octave = i // 4
        if family == "tone":
            params = {"f0": 330.0 * (1.6 ** octave)}
        elif family == "chirp":
            params = {"f_lo": 700.0 * (1.6 ** octave), "f_hi": 1400.0 * (1.6 ** octave)}
        elif family == "amnoise":
            params = {"f_lo": 2000.0 * (1.3 ** octave), "f_hi": 3800.0 * (1.3 ** octave)}
        else:
            params = {"rate": 6.0 + 2.0 * octave, "f0": 1000.0 * (1.4 ** octave)}
        classes.append(ClassSpec(i, f"{family}_{i}", family, params))
    return SourceBank(classes=classes)


@dataclass
class MixConfig:
    duration_s: float = 6.0
    n_events_min: int = 3
    n_events_max: int = 4
    n_targets: int = 2
    target_gain_db: tuple = (-2.0, 2.0)
    other_gain_db: tuple = (-17.0, -11.0)
    bg_snr_db: tuple = (13.0, 21.0)
    reverb: bool = True
    reverb_len_s: float = 0.2
    limiter_ceiling: float = 0.99

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("target_gain_db", "other_gain_db", "bg_snr_db"):
            d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(d: dict) -> "MixConfig":
        d = dict(d)
        for k in ("target_gain_db", "other_gain_db", "bg_snr_db"):
            if k in d:
                d[k] = tuple(d[k])
        return MixConfig(**d)


@dataclass
class TargetInfo:
    class_id: int
    reference: np.ndarray    # image as summed into the mixture
    enrollment: np.ndarray   # unit-peak, different instance
    instance_seed: int
    enrollment_seed: int


@dataclass
class MixtureSample:
    mixture: np.ndarray
    targets: list
    background: np.ndarray
    other_images: list       # [(class_id, image)]
    gains_db: dict           # {"events": [per-event dB, targets first], "bg_snr": dB}
    limiter_scale: float
    seed: int


def derive_seed(*parts) -> int:
    """Stable child seed from integer parts (order-sensitive)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _envelope(rng, n, sr):
    """Slow random amplitude modulation plus 20 ms edge ramps."""
    rate = rng.uniform(0.3, 1.2)
    phase = rng.uniform(0, 2 * np.pi)
    depth = rng.uniform(0.2, 0.6)
    t = np.arange(n) / sr
    env = 1.0 - depth * 0.5 * (1 + np.sin(2 * np.pi * rate * t + phase))
    ramp = min(int(0.02 * sr), n // 4)
    if ramp > 0:
        env[:ramp] *= np.linspace(0, 1, ramp)
        env[-ramp:] *= np.linspace(1, 0, ramp)
    return env


def _synth_tone(rng, params, n, sr):
    f0 = params["f0"] * (1.0 + rng.uniform(-0.03, 0.03))
    vib_rate = rng.uniform(2.0, 6.0)
    vib_depth = rng.uniform(0.0, 0.005)
    t = np.arange(n) / sr
    inst_f = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t))
    phase = 2 * np.pi * np.cumsum(inst_f) / sr + rng.uniform(0, 2 * np.pi)
    return np.sin(phase) + 0.4 * np.sin(2 * phase)


def _synth_chirp(rng, params, n, sr):
    lo, hi = params["f_lo"], params["f_hi"]
    if rng.uniform() < 0.5:
        lo, hi = hi, lo
    period = rng.uniform(0.8, 1.8)
    t = np.arange(n) / sr
    saw = (t / period) % 1.0  # repeated sweep
    inst_f = lo + (hi - lo) * saw
    phase = 2 * np.pi * np.cumsum(inst_f) / sr + rng.uniform(0, 2 * np.pi)
    return np.sin(phase)


def _synth_amnoise(rng, params, n, sr):
    noise = rng.normal(size=n)
    sos = scipy.signal.butter(4, [params["f_lo"], params["f_hi"]],
                              btype="bandpass", fs=sr, output="sos")
    x = scipy.signal.sosfilt(sos, noise)
    am_rate = rng.uniform(1.0, 4.0)
    am_phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n) / sr
    am = 0.3 + 0.7 * 0.5 * (1 + np.sin(2 * np.pi * am_rate * t + am_phase))
    return x * am


def _synth_clicks(rng, params, n, sr):
    rate, f0 = params["rate"], params["f0"]
    x = np.zeros(n)
    period = sr / rate
    burst_len = int(0.02 * sr)
    t_burst = np.arange(burst_len) / sr
    pos = rng.uniform(0, period)
    while pos < n - burst_len:
        amp = rng.uniform(0.6, 1.0)
        f = f0 * (1.0 + rng.uniform(-0.05, 0.05))
        burst = amp * np.exp(-t_burst / 0.004) * np.sin(2 * np.pi * f * t_burst)
        i = int(pos)
        x[i:i + burst_len] += burst
        pos += period * rng.uniform(0.7, 1.3)
    return x


_SYNTH = {"tone": _synth_tone, "chirp": _synth_chirp,
          "amnoise": _synth_amnoise, "clicks": _synth_clicks}


def synth_source(bank: SourceBank, class_id: int, duration_s: float, seed: int) -> Waveform:
    """One unit-peak source instance; deterministic in (bank, class, seed)."""
    spec = bank.spec(class_id)
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * SAMPLE_RATE))
    x = _SYNTH[spec.family](rng, spec.params, n, SAMPLE_RATE)
    x = x * _envelope(rng, n, SAMPLE_RATE)
    peak = np.abs(x).max()
    if peak > 0:
        x = x / peak
    return Waveform(samples=x)


def _reverb(x: np.ndarray, seed: int, length_s: float) -> np.ndarray:
    """Exponential-decay FIR: unit direct tap plus a decaying noise tail."""
    rng = np.random.default_rng(seed)
    n_ir = int(length_s * SAMPLE_RATE)
    t = np.arange(1, n_ir) / SAMPLE_RATE
    tau = length_s / np.log(1000.0)  # -60 dB at the tail
    h = np.concatenate([[1.0], 0.3 * rng.normal(size=n_ir - 1) * np.exp(-t / tau)])
    y = scipy.signal.fftconvolve(x, h)[:len(x)]
    peak = np.abs(y).max()
    return y / peak if peak > 0 else y


def _background(seed: int, n: int) -> np.ndarray:
    """Unit-RMS 1/f-shaped noise."""
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    spec /= np.sqrt(f + 30.0)
    x = np.fft.irfft(spec, n=n)
    return x / np.sqrt(np.mean(x * x))


def _rms_scale(x: np.ndarray, gain_db: float) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x))
    return x * (10 ** (gain_db / 20.0) / max(rms, 1e-12))


def make_mixture(bank: SourceBank, cfg: MixConfig, seed: int) -> MixtureSample:
    """Realize one mixture; pure function of its arguments (modulo cache)."""
    cached = _cache_load(bank, cfg, seed)
    if cached is not None:
        return cached

    rng = np.random.default_rng(seed)
    n = int(round(cfg.duration_s * SAMPLE_RATE))
    n_events = int(rng.integers(cfg.n_events_min, cfg.n_events_max + 1))
    if n_events > bank.n_classes:
        raise ValueError(f"{n_events} events need {n_events} distinct classes, "
                         f"bank has {bank.n_classes}")
    classes = rng.permutation(bank.n_classes)[:n_events].tolist()

    images, targets, others, event_gains = [], [], [], []
    for ev, class_id in enumerate(classes):
        is_target = ev < cfg.n_targets
        inst_seed = derive_seed(seed, ev, 0)
        src = synth_source(bank, class_id, cfg.duration_s, inst_seed).samples
        if cfg.reverb:
            src = _reverb(src, derive_seed(seed, ev, 1), cfg.reverb_len_s)
        lo, hi = cfg.target_gain_db if is_target else cfg.other_gain_db
        gain_db = float(rng.uniform(lo, hi))
        event_gains.append(gain_db)
        image = _rms_scale(src, gain_db)
        images.append(image)
        if is_target:
            enroll_seed = derive_seed(seed, ev, 2)
            assert enroll_seed != inst_seed
            enroll = synth_source(bank, class_id, cfg.duration_s, enroll_seed).samples
            if cfg.reverb:
                enroll = _reverb(enroll, derive_seed(seed, ev, 3), cfg.reverb_len_s)
            targets.append(TargetInfo(class_id, image, enroll, inst_seed, enroll_seed))
        else:
            others.append((class_id, image))

    fg_power = sum(float(np.sum(im * im)) for im in images)
    bg = _background(derive_seed(seed, 99, 0), n)
    bg_snr = float(rng.uniform(*cfg.bg_snr_db))
    bg = bg * np.sqrt(fg_power / len(bg) / (10 ** (bg_snr / 10.0)))

    mixture = np.sum(images, axis=0) + bg
    peak = np.abs(mixture).max()
    scale = cfg.limiter_ceiling / peak if peak > cfg.limiter_ceiling else 1.0
    if scale != 1.0:
        images = [im * scale for im in images]
        bg = bg * scale
        mixture = np.sum(images, axis=0) + bg
        for t_i, tgt in enumerate(targets):
            targets[t_i] = TargetInfo(tgt.class_id, images[t_i], tgt.enrollment,
                                      tgt.instance_seed, tgt.enrollment_seed)
        others = [(cid, images[cfg.n_targets + i]) for i, (cid, _) in enumerate(others)]

    sample = MixtureSample(mixture=mixture, targets=targets, background=bg,
                           other_images=others,
                           gains_db={"events": event_gains, "bg_snr": bg_snr},
                           limiter_scale=scale, seed=seed)
    _cache_store(bank, cfg, seed, sample)
    return sample


def downmix(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Samplewise channel mean; lengths must match."""
    left, right = np.asarray(left), np.asarray(right)
    if left.shape != right.shape:
        raise ValueError(f"channel length mismatch: {left.shape} vs {right.shape}")
    return (left + right) / 2.0


class MixtureStream:
    """Endless deterministic stream of fresh mixtures (per-epoch regeneration)."""

    def __init__(self, bank: SourceBank, cfg: MixConfig, base_seed: int = 0):
        self.bank, self.cfg, self.base_seed = bank, cfg, base_seed

    def sample(self, epoch: int, index: int) -> MixtureSample:
        return make_mixture(self.bank, self.cfg, derive_seed(self.base_seed, epoch, index))


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, bank: SourceBank, cfg: MixConfig, seeds) -> None:
    """Line-delimited manifest: header record then one record per mixture.

    Each record carries the seed (sufficient to re-render the sample) plus
    the derived composition — target/other classes, gains, enrollment
    seeds — so the file reads as a dataset description on its own.
    """
    with open(path, "w") as f:
        header = {"kind": MANIFEST_KIND, "bank": bank.to_dict(), "mix_config": cfg.to_dict()}
        f.write(json.dumps(header) + "\n")
        for i, s in enumerate(seeds):
            sample = make_mixture(bank, cfg, seed=int(s))
            record = {
                "sample_id": i,
                "seed": int(s),
                "target_classes": [int(t.class_id) for t in sample.targets],
                "other_classes": [int(c) for c, _ in sample.other_images],
                "gains_db": sample.gains_db,
                "enrollment_seeds": [int(t.enrollment_seed) for t in sample.targets],
            }
            f.write(json.dumps(record) + "\n")


def read_manifest(path):
    """-> (bank, cfg, records); rejects foreign or empty files."""
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty manifest: {path}")
    header = json.loads(lines[0])
    if header.get("kind") != MANIFEST_KIND:
        raise ValueError(f"not a {MANIFEST_KIND} manifest: {path}")
    bank = SourceBank.from_dict(header["bank"])
    cfg = MixConfig.from_dict(header["mix_config"])
    records = [json.loads(ln) for ln in lines[1:]]
    return bank, cfg, records


# ---------------------------------------------------------------------------
# optional on-disk cache, keyed by content fingerprints


def _fingerprint(bank: SourceBank, cfg: MixConfig, seed: int) -> str:
    blob = json.dumps([bank.to_dict(), cfg.to_dict(), seed], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _cache_dir() -> Optional[str]:
    return os.environ.get("TSEFORGE_CACHE") or None


def _cache_load(bank, cfg, seed) -> Optional[MixtureSample]:
    d = _cache_dir()
    if not d:
        return None
    path = os.path.join(d, _fingerprint(bank, cfg, seed) + ".npz")
    if not os.path.exists(path):
        return None
    z = np.load(path, allow_pickle=False)
    n_targets = int(z["n_targets"])
    targets = [TargetInfo(int(z[f"t{i}_class"]), z[f"t{i}_ref"], z[f"t{i}_enroll"],
                          int(z[f"t{i}_iseed"]), int(z[f"t{i}_eseed"]))
               for i in range(n_targets)]
    others = [(int(z[f"o{i}_class"]), z[f"o{i}_img"]) for i in range(int(z["n_others"]))]
    gains = {"events": z["event_gains"].tolist(), "bg_snr": float(z["bg_snr"])}
    return MixtureSample(z["mixture"], targets, z["background"], others,
                         gains, float(z["limiter_scale"]), int(z["seed"]))


def _cache_store(bank, cfg, seed, sample: MixtureSample) -> None:
    d = _cache_dir()
    if not d:
        return
    os.makedirs(d, exist_ok=True)
    arrs = {"mixture": sample.mixture, "background": sample.background,
            "limiter_scale": sample.limiter_scale, "seed": sample.seed,
            "event_gains": np.asarray(sample.gains_db["events"]),
            "bg_snr": sample.gains_db["bg_snr"],
            "n_targets": len(sample.targets), "n_others": len(sample.other_images)}
    for i, t in enumerate(sample.targets):
        arrs.update({f"t{i}_class": t.class_id, f"t{i}_ref": t.reference,
                     f"t{i}_enroll": t.enrollment, f"t{i}_iseed": t.instance_seed,
                     f"t{i}_eseed": t.enrollment_seed})
    for i, (cid, img) in enumerate(sample.other_images):
        arrs.update({f"o{i}_class": cid, f"o{i}_img": img})
    np.savez(os.path.join(d, _fingerprint(bank, cfg, seed) + ".npz"), **arrs)
