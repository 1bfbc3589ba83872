"""Waveform containers and the log-mel front-end shared by every model here.

Conventions, fixed once for the whole package:

  * mono float waveforms at 16 kHz;
  * mel analysis with a 25 ms Hann window and a 10 ms hop (400/160 samples);
  * frames are *centered*: frame t sits at sample t*hop, the edges are
    reflect-padded, and a signal of n samples yields ceil(n / hop) frames —
    exactly 100 frames per second for integral-second inputs, e.g.
    96000 samples -> 600 frames;
  * 80 triangular mel filters spanning 0–8000 Hz, area-normalized;
  * natural log with a 1e-10 power floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile
import scipy.signal

SAMPLE_RATE = 16000
N_MELS = 80
WIN_S = 0.025
HOP_S = 0.010
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono audio: 1-D float samples plus their rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Log-power mel features, [n_mels, n_frames]."""

    values: np.ndarray
    frame_hop_s: float = HOP_S
    frame_win_s: float = WIN_S

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected [n_mels, n_frames], got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mel spectrogram contains non-finite values")
        if self.frame_hop_s <= 0 or self.frame_win_s <= 0:
            raise ValueError("frame_hop_s and frame_win_s must be positive")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def frame_count(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    """Number of centered analysis frames for a signal of ``n_samples``.

    Frame t is centered at sample t*hop; frames exist for every center
    strictly inside the signal, i.e. ceil(n_samples / hop).  The count is
    non-decreasing in n_samples and equals 100 frames/s at 16 kHz.
    """
    win = int(round(WIN_S * sample_rate))
    hop = int(round(HOP_S * sample_rate))
    if n_samples < win:
        raise ValueError(f"input too short: {n_samples} samples < one {win}-sample window")
    return -(-n_samples // hop)  # ceil division


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = 400,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = None) -> np.ndarray:
    """Area-normalized triangular mel filterbank, [n_mels, n_fft//2 + 1]."""
    if fmax is None:
        fmax = sample_rate / 2.0
    n_bins = n_fft // 2 + 1
    fft_hz = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)

    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_hz - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_hz) / max(hi - ctr, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        fb[m] *= 2.0 / (hi - lo)  # area normalization
    return fb


def logmel(w: Waveform, n_mels: int = N_MELS) -> MelSpectrogram:
    """Log-power mel spectrogram of a 16 kHz waveform.

    Centered framing with reflect padding: frame t covers samples
    [t*hop - win/2, t*hop + win/2).  Scaling the input by c shifts every
    unclipped bin by log(c^2); an all-zero input sits at log(1e-10).
    """
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}; resample first")
    win = int(round(WIN_S * SAMPLE_RATE))  # 400
    hop = int(round(HOP_S * SAMPLE_RATE))  # 160
    n_frames = frame_count(len(w), SAMPLE_RATE)

    half = win // 2
    padded = np.pad(w.samples, (half, half), mode="reflect")
    # frame t in original coordinates is padded[t*hop : t*hop + win]
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx]  # [n_frames, win]

    window = scipy.signal.get_window("hann", win, fftbins=True)
    spec = np.fft.rfft(frames * window, n=win, axis=1)  # [n_frames, win//2+1]
    power = np.abs(spec) ** 2
    mel_power = power @ mel_filterbank(n_mels, win).T  # [n_frames, n_mels]
    values = np.log(np.maximum(mel_power, LOG_FLOOR)).T  # [n_mels, n_frames]
    return MelSpectrogram(values=values)


def read_wav(path) -> Waveform:
    """Read a mono 16-bit or float RIFF file; multi-channel is rejected."""
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"expected mono audio, got {data.shape[1]} channels; downmix first")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path, w: Waveform, pcm16: bool = True) -> None:
    """Write a mono WAV file, 16-bit PCM by default (float32 otherwise)."""
    if pcm16:
        clipped = np.clip(w.samples, -1.0, 1.0)
        data = np.round(clipped * 32767.0).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    scipy.io.wavfile.write(path, w.sample_rate, data)
