"""Mask-producing UNet and the end-to-end separation map.

The network sees only the spectrogram magnitude and emits M sigmoid masks;
waveforms are rebuilt from the masked magnitude with the mixture phase. Total
downsampling is 16x, so inputs must have both spatial dims divisible by 16
(the dsp module's pad/crop helpers arrange this). The first encoder stage and
the last decoder stage keep resolution; the four stages between them halve and
double it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .config import DspConfig, SeparatorConfig
from .dsp import Waveform, istft_tensor, pad_for_model, stft_tensor, unpad_masks
from .errors import ShapeError
from .checkpoint import load_archive, save_archive

MODEL_DTYPE = torch.float32


@dataclass(frozen=True)
class MaskSet:
    masks: torch.Tensor  # (M, freq, frames), entries in [0, 1]


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Linear(channels, hidden)
        self.excite = nn.Linear(hidden, channels)
        self.act = nn.GELU()

    def forward(self, x):
        pooled = x.mean(dim=(2, 3))
        scale = torch.sigmoid(self.excite(self.act(self.squeeze(pooled))))
        return x * scale[:, :, None, None]


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.act = nn.GELU()
        self.skip = (
            nn.Identity()
            if in_channels == out_channels
            else nn.Conv2d(in_channels, out_channels, 1)
        )

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(h + self.skip(x))


class _EncoderStage(nn.Module):
    def __init__(self, in_channels, out_channels, reduction, downsample):
        super().__init__()
        if downsample:
            self.down = nn.Conv2d(in_channels, out_channels, 4, stride=2, padding=1)
        else:
            self.down = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.res = ResidualBlock(out_channels, out_channels)
        self.se = SqueezeExcite(out_channels, reduction)

    def forward(self, x):
        return self.se(self.res(self.down(x)))


class _DecoderStage(nn.Module):
    def __init__(self, in_channels, skip_channels, out_channels, upsample):
        super().__init__()
        if upsample:
            self.up = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)
        else:
            self.up = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.res = ResidualBlock(out_channels + skip_channels, out_channels)

    def forward(self, x, skip):
        return self.res(torch.cat([self.up(x), skip], dim=1))


class MaskUNet(nn.Module):
    """Symmetric encoder/decoder over the magnitude with skip concatenation
    at matching resolutions, a squeeze-and-excitation bottleneck, and a 1x1
    sigmoid head emitting one mask per source."""

    def __init__(self, config: SeparatorConfig):
        super().__init__()
        config.validate()
        self.config = config
        enc_in = list(config.encoder_in_channels)
        enc_out = enc_in[1:] + [2 * enc_in[-1]]
        dec_out = list(config.decoder_out_channels)
        r = config.se_reduction

        self.stem = nn.Conv2d(1, enc_in[0], 3, padding=1)
        self.encoder = nn.ModuleList(
            _EncoderStage(enc_in[i], enc_out[i], r, downsample=i > 0)
            for i in range(len(enc_in))
        )
        self.bottleneck = SqueezeExcite(enc_out[-1], r)
        skips = enc_out[-2::-1] + [enc_in[0]]  # deepest-first, stem output last
        ins = [enc_out[-1]] + dec_out[:-1]
        self.decoder = nn.ModuleList(
            _DecoderStage(ins[i], skips[i], dec_out[i], upsample=i < len(dec_out) - 1)
            for i in range(len(dec_out))
        )
        self.head = nn.Conv2d(dec_out[-1], config.num_sources, 1)

    def forward(self, magnitude: torch.Tensor) -> torch.Tensor:
        if magnitude.ndim != 4 or magnitude.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, F, T), got {tuple(magnitude.shape)}")
        if magnitude.shape[2] % 16 or magnitude.shape[3] % 16:
            raise ShapeError(
                f"spatial dims {tuple(magnitude.shape[2:])} must be divisible by 16"
            )
        feats = [self.stem(magnitude)]
        for stage in self.encoder:
            feats.append(stage(feats[-1]))
        h = self.bottleneck(feats[-1])
        skips = feats[-2::-1]
        for stage, skip in zip(self.decoder, skips):
            h = stage(h, skip)
        return torch.sigmoid(self.head(h))


def forward_masks(model: MaskUNet, magnitude: torch.Tensor) -> MaskSet:
    """Masks for a single (freq, frames) magnitude with dims divisible by 16."""
    if magnitude.ndim != 2:
        raise ShapeError(f"expected a 2-D magnitude, got {tuple(magnitude.shape)}")
    if bool((magnitude < 0).any()):
        raise ShapeError("magnitude entries must be non-negative")
    out = model(magnitude.to(MODEL_DTYPE).unsqueeze(0).unsqueeze(0))
    return MaskSet(out.squeeze(0))


def masked_spectrograms(model: MaskUNet, mixtures: torch.Tensor, cfg: DspConfig) -> torch.Tensor:
    """Complex masked spectrograms (B, M, F, T): masks are predicted on the
    padded magnitude, un-padded, applied to the original magnitude, and
    recombined with the mixture phase (so each component carries the mixture
    phase by construction)."""
    spec = stft_tensor(mixtures, cfg)
    mag = spec.abs()
    phase = spec.angle()
    padded, original = pad_for_model(mag)
    masks = model(padded.to(MODEL_DTYPE).unsqueeze(1))
    masks = unpad_masks(masks, original)
    masked = masks * mag.unsqueeze(1)
    return masked * torch.exp(1j * phase).unsqueeze(1)


def separate_batch(model: MaskUNet, mixtures: torch.Tensor, cfg: DspConfig) -> torch.Tensor:
    """Differentiable batched separation: (B, L) -> (B, M, L)."""
    rebuilt = masked_spectrograms(model, mixtures, cfg)
    return istft_tensor(rebuilt, mixtures.shape[-1], cfg)


def separate(model: MaskUNet, mixture: Waveform, cfg: DspConfig) -> list[Waveform]:
    """Separate one mixture into the model's M component estimates."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = separate_batch(model, mixture.samples.unsqueeze(0), cfg)[0]
    finally:
        model.train(was_training)
    return [Waveform(out[i], mixture.sample_rate) for i in range(out.shape[0])]


def save_separator(path: str | Path, model: MaskUNet, extra_state: dict | None = None) -> Path:
    state = {"model": model.state_dict()}
    state.update(extra_state or {})
    cfg = model.config
    config = {
        "num_sources": cfg.num_sources,
        "encoder_in_channels": list(cfg.encoder_in_channels),
        "decoder_out_channels": list(cfg.decoder_out_channels),
        "se_reduction": cfg.se_reduction,
    }
    return save_archive(path, kind="separator", config=config, state=state)


def load_separator(path: str | Path) -> tuple[MaskUNet, dict]:
    archive = load_archive(path, expected_kind="separator")
    cfg = SeparatorConfig(
        num_sources=archive["config"]["num_sources"],
        encoder_in_channels=tuple(archive["config"]["encoder_in_channels"]),
        decoder_out_channels=tuple(archive["config"]["decoder_out_channels"]),
        se_reduction=archive["config"]["se_reduction"],
    )
    model = MaskUNet(cfg)
    model.load_state_dict(archive["state"]["model"])
    return model, archive["state"]
