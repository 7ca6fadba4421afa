"""Audio ingestion, STFT transforms, and mixture-of-mixtures construction.

Waveforms are 1-D float64 tensors; spectrograms are complex128. The analysis
parameters (frame length 1024, hop 256, Hann window, centered frames) satisfy
the overlap-add condition, so `istft(stft(w))` reconstructs `w` to near
machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from .config import DspConfig
from .errors import DecodeError, EmptyAudioError, ShapeError

DTYPE = torch.float64


@dataclass(frozen=True)
class Waveform:
    samples: torch.Tensor  # 1-D float64
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {tuple(self.samples.shape)}")

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    bins: torch.Tensor  # complex, (freq, frames)
    frame_length: int
    hop: int
    window: str
    sample_rate: int

    @property
    def magnitude(self) -> torch.Tensor:
        return self.bins.abs()

    @property
    def phase(self) -> torch.Tensor:
        return self.bins.angle()


def _window_tensor(name: str, length: int) -> torch.Tensor:
    if name == "hann":
        return torch.hann_window(length, periodic=True, dtype=DTYPE)
    if name == "hamming":
        return torch.hamming_window(length, periodic=True, dtype=DTYPE)
    raise ShapeError(f"unsupported window {name!r}")


def load_audio(path: str | Path, sample_rate: int, duration: float) -> Waveform:
    """Read a PCM WAV file, mix down to mono, resample, and pad/truncate.

    Supports 16-bit integer and 32-bit float WAV. The result always has
    exactly ``round(sample_rate * duration)`` samples.
    """
    try:
        file_rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DecodeError(f"could not decode {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyAudioError(f"{path} contains no samples")

    x = np.asarray(data, dtype=np.float64)
    if np.issubdtype(data.dtype, np.integer):
        x = x / float(np.iinfo(data.dtype).max)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise DecodeError(f"{path} contains non-finite samples")

    if file_rate != sample_rate:
        g = math.gcd(sample_rate, file_rate)
        x = resample_poly(x, sample_rate // g, file_rate // g)

    target = int(round(sample_rate * duration))
    if x.shape[0] >= target:
        x = x[:target]
    else:
        x = np.pad(x, (0, target - x.shape[0]))
    return Waveform(torch.as_tensor(x, dtype=DTYPE), sample_rate)


def stft_tensor(x: torch.Tensor, cfg: DspConfig) -> torch.Tensor:
    """STFT of one or more waveforms, shape (..., freq, frames), complex."""
    if x.shape[-1] < cfg.frame_length:
        raise ShapeError(
            f"waveform of {x.shape[-1]} samples is shorter than one frame ({cfg.frame_length})"
        )
    window = _window_tensor(cfg.window, cfg.frame_length)
    flat = x.reshape(-1, x.shape[-1]).to(DTYPE)
    spec = torch.stft(
        flat,
        n_fft=cfg.frame_length,
        hop_length=cfg.hop,
        window=window,
        center=True,
        return_complex=True,
    )
    return spec.reshape(*x.shape[:-1], *spec.shape[-2:])


def istft_tensor(spec: torch.Tensor, length: int, cfg: DspConfig) -> torch.Tensor:
    """Inverse STFT back to (..., length) float64 waveforms."""
    expected_freq = cfg.frame_length // 2 + 1
    if spec.shape[-2] != expected_freq:
        raise ShapeError(
            f"spectrogram has {spec.shape[-2]} frequency bins, expected {expected_freq}"
        )
    window = _window_tensor(cfg.window, cfg.frame_length)
    flat = spec.reshape(-1, *spec.shape[-2:])
    wav = torch.istft(
        flat,
        n_fft=cfg.frame_length,
        hop_length=cfg.hop,
        window=window,
        center=True,
        length=length,
    )
    return wav.reshape(*spec.shape[:-2], length)


def stft(w: Waveform, cfg: DspConfig) -> Spectrogram:
    bins = stft_tensor(w.samples, cfg)
    return Spectrogram(bins, cfg.frame_length, cfg.hop, cfg.window, w.sample_rate)


def istft(spec: Spectrogram, length: int) -> Waveform:
    cfg = DspConfig(
        sample_rate=spec.sample_rate,
        frame_length=spec.frame_length,
        hop=spec.hop,
        window=spec.window,
    )
    return Waveform(istft_tensor(spec.bins, length, cfg), spec.sample_rate)


def make_mom(m1: Waveform, m2: Waveform) -> Waveform:
    """Sum two mixtures into a mixture of mixtures."""
    if m1.sample_rate != m2.sample_rate:
        raise ShapeError(f"sample rates differ: {m1.sample_rate} vs {m2.sample_rate}")
    if m1.num_samples != m2.num_samples:
        raise ShapeError(f"lengths differ: {m1.num_samples} vs {m2.num_samples}")
    return Waveform(m1.samples + m2.samples, m1.sample_rate)


def pad_for_model(mag: torch.Tensor, multiple: int = 16) -> tuple[torch.Tensor, tuple[int, int]]:
    """Crop the top frequency bins and zero-pad frames so both spatial dims
    are divisible by ``multiple``. Returns the padded magnitude and the
    original (freq, frames) for :func:`unpad_masks`."""
    freq, frames = mag.shape[-2], mag.shape[-1]
    freq16 = (freq // multiple) * multiple
    if freq16 == 0:
        raise ShapeError(f"{freq} frequency bins cannot be cropped to a multiple of {multiple}")
    frames16 = int(math.ceil(frames / multiple) * multiple)
    out = mag[..., :freq16, :]
    if frames16 > frames:
        pad = torch.zeros(*out.shape[:-1], frames16 - frames, dtype=out.dtype)
        out = torch.cat([out, pad], dim=-1)
    return out, (freq, frames)


def unpad_masks(masks: torch.Tensor, original: tuple[int, int]) -> torch.Tensor:
    """Inverse of :func:`pad_for_model` for mask arrays: drop padded frames and
    restore cropped top-frequency rows by replicating the highest kept row."""
    freq, frames = original
    out = masks[..., :frames]
    missing = freq - out.shape[-2]
    if missing > 0:
        top = out[..., -1:, :].expand(*out.shape[:-2], missing, out.shape[-1])
        out = torch.cat([out, top], dim=-2)
    return out
