"""Conditioning adapter and toy latent diffusion.

The projector adds trainable position embeddings to the audio embeddings and
maps them through a small MLP into the conditioning dimension. Each attention
site fuses a frozen text branch and a trainable audio branch whose outputs are
summed; queries are shared. The denoiser is a two-resolution UNet over small
latents, standing in for a full pretrained backbone while keeping the
conditioning mechanism identical. The unconditional branch everywhere is
"audio embeddings set to zero" (the projector then emits a learned sequence).
"""

from __future__ import annotations

import math
from pathlib import Path

import torch
from torch import nn

from .config import AdapterConfig
from .errors import ConfigError, ShapeError
from .checkpoint import load_archive, save_archive


class NoiseSchedule:
    """Linear-beta schedule with cumulative signal levels; index 0 is the
    clean-data convention (alpha_bar[0] == 1)."""

    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if timesteps < 1:
            raise ConfigError("schedule needs at least one timestep")
        self.timesteps = timesteps
        self.betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        bars = torch.cumprod(1.0 - self.betas, dim=0)
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), bars])

    def signal_level(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool((t < 0).any()) or bool((t > self.timesteps).any()):
            raise IndexError(f"timestep out of range [0, {self.timesteps}]")
        return self.alpha_bars[t]

    def forward_diffuse(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """Closed-form noising: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
        abar = self.signal_level(t).to(z0.dtype)
        while abar.ndim < z0.ndim:
            abar = abar.unsqueeze(-1)
        return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def classifier_free_eps(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, guidance: float) -> torch.Tensor:
    """Guided noise estimate. Written so guidance 0 and 1 return the
    unconditional and conditional branches exactly."""
    return (1.0 - guidance) * eps_uncond + guidance * eps_cond


class ConditionProjector(nn.Module):
    """Trainable per-slot position embeddings plus a two-layer MLP with layer
    normalization, mapping (M, D) audio embeddings to (M, D') condition
    tokens. Rows are processed independently."""

    def __init__(self, num_slots: int, embed_dim: int, cond_dim: int):
        super().__init__()
        self.num_slots = num_slots
        self.position = nn.Parameter(torch.randn(num_slots, embed_dim) * 0.02)
        self.net = nn.Sequential(
            nn.Linear(embed_dim, cond_dim),
            nn.GELU(),
            nn.Linear(cond_dim, cond_dim),
            nn.LayerNorm(cond_dim),
        )

    def forward(self, audio_emb: torch.Tensor) -> torch.Tensor:
        if audio_emb.shape[-2] != self.num_slots:
            raise ShapeError(
                f"expected {self.num_slots} embedding rows, got {audio_emb.shape[-2]}"
            )
        return self.net(audio_emb + self.position)


class DecoupledCrossAttention(nn.Module):
    """Shared-query attention with separate key/value maps per modality;
    the per-modality outputs are summed. An empty modality contributes zero."""

    def __init__(self, query_dim: int, cond_dim: int, text_dim: int, heads: int):
        super().__init__()
        if cond_dim % heads or query_dim % heads:
            raise ConfigError("heads must divide both cond_dim and query_dim")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(cond_dim)
        self.to_q = nn.Linear(query_dim, cond_dim, bias=False)
        self.to_k_audio = nn.Linear(cond_dim, cond_dim, bias=False)
        self.to_v_audio = nn.Linear(cond_dim, query_dim, bias=False)
        self.to_k_text = nn.Linear(text_dim, cond_dim, bias=False)
        self.to_v_text = nn.Linear(text_dim, query_dim, bias=False)

    def _attend(self, q, k, v):
        b, n, _ = q.shape
        m = k.shape[1]
        h = self.heads
        q = q.reshape(b, n, h, -1).transpose(1, 2)
        k = k.reshape(b, m, h, -1).transpose(1, 2)
        v = v.reshape(b, m, h, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        out = attn @ v
        return out.transpose(1, 2).reshape(b, n, -1)

    def forward(self, queries, audio_tokens=None, text_tokens=None):
        q = self.to_q(queries)
        out = torch.zeros_like(queries)
        if text_tokens is not None and text_tokens.shape[1] > 0:
            out = out + self._attend(q, self.to_k_text(text_tokens), self.to_v_text(text_tokens))
        if audio_tokens is not None and audio_tokens.shape[1] > 0:
            out = out + self._attend(q, self.to_k_audio(audio_tokens), self.to_v_audio(audio_tokens))
        return out


def _timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    angles = t.float().unsqueeze(-1) * freqs
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


class _TimeResBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_dim):
        super().__init__()
        groups = math.gcd(8, in_channels)
        self.norm1 = nn.GroupNorm(groups, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.GELU()
        self.skip = (
            nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)
        )

    def forward(self, x, temb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class _AttentionSite(nn.Module):
    """Residual cross-attention over flattened spatial tokens, with a frozen
    random injection path used by the adapter-bypass ablation."""

    def __init__(self, channels, cond_dim, text_dim, heads):
        super().__init__()
        self.attn = DecoupledCrossAttention(channels, cond_dim, text_dim, heads)
        self.inject = nn.Linear(cond_dim, channels, bias=False)
        self.inject.weight.requires_grad_(False)

    def forward(self, x, audio_tokens, text_tokens, bypass_audio: bool):
        b, c, hh, ww = x.shape
        tokens = x.reshape(b, c, hh * ww).transpose(1, 2)
        if bypass_audio:
            out = self.attn(tokens, None, text_tokens)
            if audio_tokens is not None:
                x = x + self.inject(audio_tokens.mean(dim=1))[:, :, None, None]
        else:
            out = self.attn(tokens, audio_tokens, text_tokens)
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


class ToyDenoiser(nn.Module):
    """Small two-resolution UNet over latents with one decoupled
    cross-attention site per resolution."""

    def __init__(self, cfg: AdapterConfig, text_dim: int):
        super().__init__()
        c = cfg.base_channels
        time_dim = 4 * c
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.GELU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, c, 3, padding=1)
        self.res1 = _TimeResBlock(c, c, time_dim)
        self.site1 = _AttentionSite(c, cfg.cond_dim, text_dim, cfg.heads)
        self.down = nn.Conv2d(c, 2 * c, 4, stride=2, padding=1)
        self.res2 = _TimeResBlock(2 * c, 2 * c, time_dim)
        self.site2 = _AttentionSite(2 * c, cfg.cond_dim, text_dim, cfg.heads)
        self.res_mid = _TimeResBlock(2 * c, 2 * c, time_dim)
        self.up = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.res_out = _TimeResBlock(2 * c, c, time_dim)
        self.conv_out = nn.Conv2d(c, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, t, audio_tokens=None, text_tokens=None, bypass_audio=False):
        temb = self.time_mlp(_timestep_features(torch.as_tensor(t).reshape(-1), self.time_dim))
        h1 = self.res1(self.conv_in(z), temb)
        h1 = self.site1(h1, audio_tokens, text_tokens, bypass_audio)
        h2 = self.res2(self.down(h1), temb)
        h2 = self.site2(h2, audio_tokens, text_tokens, bypass_audio)
        h2 = self.res_mid(h2, temb)
        h = self.res_out(torch.cat([self.up(h2), h1], dim=1), temb)
        return self.conv_out(h)


class ToyAutoencoder(nn.Module):
    """Compresses 3xSxS images into small latents; decoder output is
    sigmoid-bounded to [0, 1]."""

    def __init__(self, latent_channels: int = 4):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.GELU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, 32, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 32, 3, padding=1), nn.GELU(),
            nn.ConvTranspose2d(32, 32, 4, stride=2, padding=1), nn.GELU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(16, 3, 3, padding=1),
        )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(latents))


class AudioConditionedGenerator(nn.Module):
    """Bundle of autoencoder, denoiser, condition projector, and schedule.

    Which parts train is decided by the caller: backbone pretraining updates
    the autoencoder/denoiser (text branch included), while adapter training
    updates only :meth:`adapter_parameters`.
    """

    def __init__(self, cfg: AdapterConfig, num_slots: int, embed_dim: int, text_dim: int):
        super().__init__()
        self.cfg = cfg
        self.num_slots = num_slots
        self.embed_dim = embed_dim
        self.text_dim = text_dim
        self.autoencoder = ToyAutoencoder(cfg.latent_channels)
        self.denoiser = ToyDenoiser(cfg, text_dim)
        self.projector = ConditionProjector(num_slots, embed_dim, cfg.cond_dim)
        self.schedule = NoiseSchedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        self.register_buffer("latent_mean", torch.zeros(1))
        self.register_buffer("latent_std", torch.ones(1))
        self.bypass_audio = False

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return (self.autoencoder.encode(images) - self.latent_mean) / self.latent_std

    def decode_latent(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[-3:] != (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size):
            raise ShapeError(
                f"latent shape {tuple(latents.shape[-3:])} does not match the decoder"
            )
        return self.autoencoder.decode(latents * self.latent_std + self.latent_mean)

    def adapter_parameters(self):
        """Parameters trained in stage 2: position embeddings, the projection
        MLP, and the audio key/value maps of every attention site."""
        yield from self.projector.parameters()
        for site in (self.denoiser.site1, self.denoiser.site2):
            yield from site.attn.to_k_audio.parameters()
            yield from site.attn.to_v_audio.parameters()

    def adapter_parameter_names(self) -> list[str]:
        ids = {id(p) for p in self.adapter_parameters()}
        return [name for name, p in self.named_parameters() if id(p) in ids]

    def _eps(self, z, t, audio_tokens, text_tokens):
        return self.denoiser(z, t, audio_tokens, text_tokens, bypass_audio=self.bypass_audio)

    def denoise_loss(
        self,
        latents: torch.Tensor,
        audio_emb: torch.Tensor | None,
        text_tokens: torch.Tensor | None,
        generator: torch.Generator,
    ) -> torch.Tensor:
        """Noise-prediction objective: sample a timestep and noise per item,
        corrupt the latents, and score the prediction with mean squared
        error per element."""
        batch = latents.shape[0]
        t = torch.randint(1, self.schedule.timesteps + 1, (batch,), generator=generator)
        eps = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
        z_t = self.schedule.forward_diffuse(latents, t, eps)
        audio_tokens = None if audio_emb is None else self.projector(audio_emb)
        pred = self._eps(z_t, t, audio_tokens, text_tokens)
        return ((eps - pred) ** 2).mean()

    @torch.no_grad()
    def sample(
        self,
        audio_emb: torch.Tensor,
        text_tokens: torch.Tensor | None = None,
        steps: int = 25,
        guidance: float = 7.5,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Deterministic reverse process from pure noise with classifier-free
        guidance; the unconditional branch zeroes the audio embeddings."""
        if steps < 1:
            raise ConfigError("sampling needs at least one step")
        if audio_emb.ndim == 2:
            audio_emb = audio_emb.unsqueeze(0)
        batch = audio_emb.shape[0]
        cond = self.projector(audio_emb)
        uncond = self.projector(torch.zeros_like(audio_emb))
        shape = (batch, self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size)
        z = torch.randn(shape, generator=generator)
        timesteps = torch.linspace(self.schedule.timesteps, 0, steps + 1).round().long()
        for i in range(steps):
            t_cur, t_next = int(timesteps[i]), int(timesteps[i + 1])
            tt = torch.full((batch,), t_cur)
            eps_c = self._eps(z, tt, cond, text_tokens)
            eps_u = self._eps(z, tt, uncond, None)
            eps_hat = classifier_free_eps(eps_u, eps_c, guidance)
            a_cur = float(self.schedule.signal_level(t_cur))
            a_next = float(self.schedule.signal_level(t_next))
            z0_hat = (z - math.sqrt(1.0 - a_cur) * eps_hat) / math.sqrt(a_cur)
            z = math.sqrt(a_next) * z0_hat + math.sqrt(1.0 - a_next) * eps_hat
        return z


def save_generator(path: str | Path, gen: AudioConditionedGenerator, extra_state: dict | None = None) -> Path:
    cfg = gen.cfg
    config = {
        "adapter": {
            "cond_dim": cfg.cond_dim,
            "heads": cfg.heads,
            "latent_channels": cfg.latent_channels,
            "latent_size": cfg.latent_size,
            "image_size": cfg.image_size,
            "base_channels": cfg.base_channels,
            "timesteps": cfg.timesteps,
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
            "sample_steps": cfg.sample_steps,
            "guidance": cfg.guidance,
            "uncond_prob": cfg.uncond_prob,
        },
        "num_slots": gen.num_slots,
        "embed_dim": gen.embed_dim,
        "text_dim": gen.text_dim,
    }
    state = {"model": gen.state_dict()}
    state.update(extra_state or {})
    return save_archive(path, kind="generator", config=config, state=state)


def load_generator(path: str | Path) -> tuple[AudioConditionedGenerator, dict]:
    archive = load_archive(path, expected_kind="generator")
    cfg = AdapterConfig(**archive["config"]["adapter"])
    gen = AudioConditionedGenerator(
        cfg,
        num_slots=archive["config"]["num_slots"],
        embed_dim=archive["config"]["embed_dim"],
        text_dim=archive["config"]["text_dim"],
    )
    gen.load_state_dict(archive["state"]["model"])
    return gen, archive["state"]
