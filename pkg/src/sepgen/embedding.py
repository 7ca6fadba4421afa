"""Shared audio-text embedding space, label templating, and similarities.

The real system uses a large pretrained audio-text model; here the
:class:`ToyEmbedder` stands in behind the same interface so that a full-scale
backend can be dropped in without touching the losses. The toy audio path is
differentiable with respect to the waveform (band energies through a fixed
projection), which the stage-1 alignment losses rely on.
"""

from __future__ import annotations

import abc
import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .config import DspConfig, EmbedConfig
from .dsp import DTYPE, Waveform, stft_tensor
from .errors import ConfigError, DataError, NormalizationError
from .checkpoint import load_archive, save_archive

PHRASE_PREFIX = "The sound of "
NOISE_LABEL = "Noise"


def make_label_phrases(labels: list[str], num_slots: int) -> list[str]:
    """Template each label and pad with the noise placeholder up to M."""
    if not labels:
        raise DataError("label list is empty")
    if len(labels) > num_slots:
        raise DataError(f"{len(labels)} labels exceed the {num_slots} available slots")
    phrases = [PHRASE_PREFIX + label for label in labels]
    phrases += [PHRASE_PREFIX + NOISE_LABEL] * (num_slots - len(labels))
    return phrases


class Embedder(abc.ABC):
    """Deterministic map from audio or text into a shared D-dimensional space."""

    dimension: int

    @abc.abstractmethod
    def embed_audio(self, audio) -> torch.Tensor:
        """Accepts a Waveform or a (..., L) tensor; returns (..., D)."""

    @abc.abstractmethod
    def embed_text(self, text: str) -> torch.Tensor:
        """Returns a (D,) embedding for a label phrase."""


def mel_filterbank(num_bands: int, num_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank over the positive-frequency bins."""
    max_mel = 2595.0 * np.log10(1.0 + (sample_rate / 2) / 700.0)
    mel_points = np.linspace(0.0, max_mel, num_bands + 2)
    hz_points = 700.0 * (10.0 ** (mel_points / 2595.0) - 1.0)
    bin_freqs = np.linspace(0.0, sample_rate / 2, num_bins)
    bank = np.zeros((num_bands, num_bins))
    for b in range(num_bands):
        lo, mid, hi = hz_points[b : b + 3]
        rising = (bin_freqs - lo) / max(mid - lo, 1e-9)
        falling = (hi - bin_freqs) / max(hi - mid, 1e-9)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


class ToyEmbedder(Embedder):
    """Seeded random-projection embedder.

    Audio: band energies from a short STFT -> log1p -> soft normalization ->
    fixed Gaussian projection plus bias. Text: known class labels map to a
    prototype band histogram through the same projection (so a class label and
    a tone in that class's band land nearby); unknown labels hash to a column
    of a separate projection, landing roughly orthogonal to every audio
    embedding.
    """

    _VOCAB = 4096

    def __init__(
        self,
        dimension: int,
        sample_rate: int,
        seed: int = 0,
        mel_bands: int = 32,
        frame_length: int = 256,
        hop: int = 128,
        class_bands: Mapping[str, tuple[float, float]] | None = None,
    ):
        if dimension < 1 or mel_bands < 1:
            raise ConfigError("embedder dimension and mel_bands must be positive")
        self.dimension = dimension
        self.sample_rate = sample_rate
        self.seed = seed
        self.mel_bands = mel_bands
        self.class_bands = dict(class_bands or {})
        self._dsp = DspConfig(
            sample_rate=sample_rate, frame_length=frame_length, hop=hop
        )
        rng = np.random.default_rng(seed)
        self.audio_proj = torch.as_tensor(
            rng.normal(size=(dimension, mel_bands)) / np.sqrt(mel_bands), dtype=DTYPE
        )
        self.bias = torch.as_tensor(0.05 * rng.normal(size=dimension), dtype=DTYPE)
        self.text_proj = torch.as_tensor(
            rng.normal(size=(dimension, self._VOCAB)) / np.sqrt(dimension), dtype=DTYPE
        )
        self.filterbank = torch.as_tensor(
            mel_filterbank(mel_bands, frame_length // 2 + 1, sample_rate), dtype=DTYPE
        )

    def _band_histogram(self, samples: torch.Tensor) -> torch.Tensor:
        spec = stft_tensor(samples, self._dsp)
        power = spec.abs().pow(2).mean(dim=-1)
        energies = power @ self.filterbank.T
        hist = torch.log1p(energies)
        return hist / (1.0 + hist.norm(dim=-1, keepdim=True))

    def embed_audio(self, audio) -> torch.Tensor:
        samples = audio.samples if isinstance(audio, Waveform) else audio
        hist = self._band_histogram(samples.to(DTYPE))
        return hist @ self.audio_proj.T + self.bias

    def _prototype_histogram(self, band: tuple[float, float]) -> torch.Tensor:
        lo, hi = band
        freqs = np.linspace(0.0, self.sample_rate / 2, self._dsp.frame_length // 2 + 1)
        proto = torch.as_tensor(
            ((freqs >= lo) & (freqs <= hi)).astype(np.float64), dtype=DTYPE
        )
        hist = torch.log1p(proto @ self.filterbank.T * 10.0)
        return hist / (1.0 + hist.norm())

    def embed_text(self, text: str) -> torch.Tensor:
        label = text.removeprefix(PHRASE_PREFIX)
        if label in self.class_bands:
            hist = self._prototype_histogram(self.class_bands[label])
            return hist @ self.audio_proj.T + self.bias
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        idx = int.from_bytes(digest[:8], "big") % self._VOCAB
        return self.text_proj[:, idx] + self.bias

    def state(self) -> dict:
        return {
            "dimension": self.dimension,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "mel_bands": self.mel_bands,
            "frame_length": self._dsp.frame_length,
            "hop": self._dsp.hop,
            "class_bands": self.class_bands,
        }


def embed_separations(separations, embedder: Embedder) -> torch.Tensor:
    """Row i is the audio embedding of separation i. Accepts a list of
    Waveforms or an (M, L) tensor; keeps the autograd graph."""
    if isinstance(separations, torch.Tensor):
        return embedder.embed_audio(separations)
    stacked = torch.stack([s.samples if isinstance(s, Waveform) else s for s in separations])
    return embedder.embed_audio(stacked)


def similarity_vector(mix_embedding: torch.Tensor, sep_embeddings: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of the mixture embedding against each separation row."""
    mix_norm = mix_embedding.norm()
    row_norms = sep_embeddings.norm(dim=-1)
    if bool(mix_norm == 0) or bool((row_norms == 0).any()):
        raise NormalizationError("cannot take cosine similarity with a zero vector")
    return (sep_embeddings @ mix_embedding) / (row_norms * mix_norm)


def save_embedder(path: str | Path, embedder: ToyEmbedder) -> None:
    save_archive(path, kind="embedder", config=embedder.state(), state={})


def load_embedder_checkpoint(path: str | Path) -> ToyEmbedder:
    archive = load_archive(path, expected_kind="embedder")
    cfg = archive["config"]
    cfg["class_bands"] = {k: tuple(v) for k, v in (cfg.get("class_bands") or {}).items()}
    return ToyEmbedder(**cfg)


def build_embedder(
    cfg: EmbedConfig,
    sample_rate: int,
    class_bands: Mapping[str, tuple[float, float]] | None = None,
) -> Embedder:
    if cfg.backend == "toy":
        return ToyEmbedder(
            dimension=cfg.dimension,
            sample_rate=sample_rate,
            seed=cfg.seed,
            mel_bands=cfg.mel_bands,
            frame_length=cfg.frame_length,
            hop=cfg.hop,
            class_bands=class_bands,
        )
    if cfg.backend == "external":
        if not cfg.checkpoint:
            raise ConfigError("embed.backend=external requires embed.checkpoint")
        return load_embedder_checkpoint(cfg.checkpoint)
    raise ConfigError(f"unknown embed backend {cfg.backend!r}")
