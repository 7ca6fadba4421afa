"""Training loops, separation quality evaluation, and analysis operations.

Stage 1 trains the mask UNet on mixture-of-mixture pairs with the scheduled
combination of reconstruction, contrastive, and ranking terms. Stage 2
freezes everything from stage 1 plus the generator backbone and trains only
the adapter (position embeddings, projection MLP, audio key/value maps).
The backbone itself is produced by :func:`pretrain_generator`, a
text-conditional diffusion run on the synthetic corpus that stands in for a
large pretrained generation model.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adapter import AudioConditionedGenerator, load_generator, save_generator
from .config import PipelineConfig
from .corpus import (
    ManifestEntry,
    class_bands_from_meta,
    load_corpus_meta,
    load_manifest,
)
from .dsp import DTYPE, load_audio
from .embedding import (
    PHRASE_PREFIX,
    build_embedder,
    make_label_phrases,
    similarity_vector,
)
from .errors import ConfigError, DataError
from .losses import (
    ContrastiveTemperature,
    LossWeights,
    contrastive_loss,
    reconstruction_loss_batch,
    schedule_weights,
    si_sdr_loss,
    soft_assign,
    spearman_rank_loss,
    stage1_loss,
)
from .separator import MaskUNet, load_separator, save_separator, separate_batch

STAGE1_VARIANTS = ("full", "no_rank", "no_contrastive", "reconstruction_only")


def decayed_param_groups(named_parameters, weight_decay: float) -> list[dict]:
    """AdamW groups with weight decay only on weight matrices; biases and
    normalization parameters stay unregularized so mask logits can saturate."""
    decay, no_decay = [], []
    for name, p in named_parameters:
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith("bias"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def weights_for_variant(variant: str, epoch: int, total_epochs: int) -> LossWeights:
    if variant == "reconstruction_only":
        return LossWeights(1.0, 0.0, 0.0)
    w = schedule_weights(epoch, total_epochs)
    if variant == "full":
        return w
    if variant == "no_rank":
        return LossWeights(w.reconstruction, w.contrastive, 0.0)
    if variant == "no_contrastive":
        return LossWeights(w.reconstruction, 0.0, w.ranking)
    raise ConfigError(f"unknown stage-1 variant {variant!r}")


def load_training_set(
    entries: list[ManifestEntry], cfg: PipelineConfig
) -> tuple[torch.Tensor, list[tuple[str, ...]]]:
    waves = [
        load_audio(e.audio_path, cfg.dsp.sample_rate, cfg.dsp.duration_s).samples
        for e in entries
    ]
    return torch.stack(waves), [e.labels for e in entries]


def load_image_array(path: Path) -> np.ndarray:
    from PIL import Image

    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img


def load_image_batch(entries: list[ManifestEntry]) -> torch.Tensor:
    arrays = []
    for e in entries:
        if e.image_path is None:
            raise DataError(f"{e.audio_path} has no paired image")
        arrays.append(load_image_array(e.image_path))
    stacked = np.stack(arrays).transpose(0, 3, 1, 2)
    return torch.as_tensor(stacked, dtype=torch.float32)


def split_holdout(n: int, fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic split: the tail `fraction` of items is held out."""
    cut = n - max(2, int(round(n * fraction)))
    return list(range(cut)), list(range(cut, n))


def _pair_up(indices: list[int]) -> list[tuple[int, int]]:
    return [(indices[i], indices[i + 1]) for i in range(0, len(indices) - 1, 2)]


def disjoint_pairs(indices: list[int], labels: list[tuple[str, ...]]) -> list[tuple[int, int]]:
    """Greedy matching of items with non-overlapping label sets."""
    pool = list(indices)
    pairs = []
    while pool:
        first = pool.pop(0)
        partner = next(
            (j for j in pool if not set(labels[first]) & set(labels[j])), None
        )
        if partner is None:
            continue
        pool.remove(partner)
        pairs.append((first, partner))
    return pairs


class _TextEmbeddingCache:
    def __init__(self, embedder):
        self.embedder = embedder
        self._cache: dict[str, torch.Tensor] = {}

    def __call__(self, phrase: str) -> torch.Tensor:
        if phrase not in self._cache:
            self._cache[phrase] = self.embedder.embed_text(phrase)
        return self._cache[phrase]


def _dedup(labels: tuple[str, ...]) -> list[str]:
    seen = []
    for lab in labels:
        if lab not in seen:
            seen.append(lab)
    return seen


@dataclass
class Stage1Result:
    checkpoint: Path
    log_path: Path
    history: list[dict]


def train_stage1(
    cfg: PipelineConfig,
    manifest_path: str | Path,
    out_dir: str | Path,
    variant: str = "full",
) -> Stage1Result:
    """Mixture-of-mixtures training of the separator with scheduled weights."""
    if variant not in STAGE1_VARIANTS:
        raise ConfigError(f"unknown stage-1 variant {variant!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = load_manifest(manifest_path)
    if len(entries) < 2:
        raise DataError("stage-1 training needs at least 2 manifest entries")
    meta = load_corpus_meta(manifest_path)

    set_seed(cfg.seed)
    waves, labels = load_training_set(entries, cfg)
    embedder = build_embedder(cfg.embed, cfg.dsp.sample_rate, class_bands_from_meta(meta))
    text_cache = _TextEmbeddingCache(embedder)
    model = MaskUNet(cfg.separator)
    temperature = ContrastiveTemperature(cfg.loss.tau_prime_init)
    named = list(model.named_parameters()) + list(temperature.named_parameters())
    opt = torch.optim.AdamW(
        decayed_param_groups(named, cfg.stage1.weight_decay),
        lr=cfg.stage1.learning_rate,
        betas=(cfg.stage1.beta1, cfg.stage1.beta2),
    )
    train_idx, _ = split_holdout(len(entries), cfg.stage1.holdout_fraction)
    sampler = torch.Generator().manual_seed(cfg.seed)
    num_sources = cfg.separator.num_sources
    epochs = cfg.stage1.epochs
    log_path = out / f"stage1_{variant}_log.jsonl"
    history: list[dict] = []
    with log_path.open("w") as log:
        for epoch in range(1, epochs + 1):
            weights = weights_for_variant(variant, epoch, epochs)
            order = [train_idx[i] for i in torch.randperm(len(train_idx), generator=sampler)]
            pairs = _pair_up(order)
            sums = {"rec": 0.0, "cl": 0.0, "rank": 0.0, "loss": 0.0}
            batches = 0
            for start in range(0, len(pairs), cfg.stage1.batch_size):
                chunk = pairs[start : start + cfg.stage1.batch_size]
                first = torch.tensor([p[0] for p in chunk])
                second = torch.tensor([p[1] for p in chunk])
                m1, m2 = waves[first], waves[second]
                mom = m1 + m2
                separations = separate_batch(model, mom, cfg.dsp)
                rec_losses, _ = reconstruction_loss_batch(
                    m1, m2, separations, cfg.loss.epsilon_sisdr
                )
                rec = rec_losses.mean()
                audio_emb = embedder.embed_audio(separations)
                mix_emb = embedder.embed_audio(mom)
                rank_terms, cl_terms = [], []
                for b in range(len(chunk)):
                    sims = similarity_vector(mix_emb[b], audio_emb[b])
                    rank_terms.append(spearman_rank_loss(sims, cfg.loss.epsilon_rank))
                    merged = _dedup(labels[int(first[b])] + labels[int(second[b])])
                    phrases = make_label_phrases(merged, num_sources)
                    text_emb = torch.stack([text_cache(p) for p in phrases])
                    assigned = soft_assign(audio_emb[b], text_emb, cfg.loss.tau)
                    cl_terms.append(
                        contrastive_loss(audio_emb[b], assigned, temperature.tau)
                    )
                rank = torch.stack(rank_terms).mean()
                cl = torch.stack(cl_terms).mean()
                loss = stage1_loss(rec, cl, rank, weights)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums["rec"] += float(rec)
                sums["cl"] += float(cl)
                sums["rank"] += float(rank)
                sums["loss"] += float(loss)
                batches += 1
            record = {
                "event": "epoch",
                "stage": 1,
                "variant": variant,
                "epoch": epoch,
                "rec_weight": weights.reconstruction,
                "cl_weight": weights.contrastive,
                "rank_weight": weights.ranking,
                **{k: v / max(batches, 1) for k, v in sums.items()},
            }
            history.append(record)
            log.write(json.dumps(record) + "\n")
    ckpt = save_separator(
        out / f"stage1_{variant}.pt",
        model,
        {
            "temperature": temperature.state_dict(),
            "variant": variant,
            "seed": cfg.seed,
        },
    )
    return Stage1Result(ckpt, log_path, history)


def pair_reconstruction_sisdr(
    m1: torch.Tensor, m2: torch.Tensor, separations: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """Best-bipartition SI-SDR in dB, averaged over the two mixture targets."""
    losses, _ = reconstruction_loss_batch(m1, m2, separations, eps)
    return -losses / 2.0


def evaluate_separation(
    model: MaskUNet,
    waves: torch.Tensor,
    pairs: list[tuple[int, int]],
    cfg: PipelineConfig,
) -> float:
    model.eval()
    first = torch.tensor([p[0] for p in pairs], dtype=torch.long)
    second = torch.tensor([p[1] for p in pairs], dtype=torch.long)
    m1, m2 = waves[first], waves[second]
    with torch.no_grad():
        separations = separate_batch(model, m1 + m2, cfg.dsp)
        scores = pair_reconstruction_sisdr(m1, m2, separations, cfg.loss.epsilon_sisdr)
    return float(scores.mean())


def raw_mixture_baseline(
    waves: torch.Tensor, pairs: list[tuple[int, int]], eps: float = 1e-8
) -> float:
    """SI-SDR when the unseparated mixture itself is used as both estimates."""
    first = torch.tensor([p[0] for p in pairs], dtype=torch.long)
    second = torch.tensor([p[1] for p in pairs], dtype=torch.long)
    m1, m2 = waves[first], waves[second]
    mom = m1 + m2
    score = -(si_sdr_loss(m1, mom, eps) + si_sdr_loss(m2, mom, eps)) / 2.0
    return float(score.mean())


def bandpass_oracle(
    waves: torch.Tensor,
    pairs: list[tuple[int, int]],
    bands: dict[str, tuple[float, float]],
    sample_rate: int,
    eps: float = 1e-8,
) -> float:
    """Brute-force oracle: split each mixture of mixtures into per-class
    signals by zeroing FFT bins outside each class band, then take the best
    bipartition. Valid because corpus class bands are disjoint."""
    first = torch.tensor([p[0] for p in pairs], dtype=torch.long)
    second = torch.tensor([p[1] for p in pairs], dtype=torch.long)
    m1, m2 = waves[first], waves[second]
    mom = (m1 + m2).numpy()
    n = mom.shape[-1]
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    estimates = []
    for lo, hi in bands.values():
        spectrum = np.fft.rfft(mom, axis=-1)
        spectrum[:, (freqs < lo) | (freqs > hi)] = 0.0
        estimates.append(np.fft.irfft(spectrum, n=n, axis=-1))
    separations = torch.as_tensor(np.stack(estimates, axis=1), dtype=DTYPE)
    return float(pair_reconstruction_sisdr(m1, m2, separations, eps).mean())


@dataclass
class Stage2Result:
    checkpoint: Path
    log_path: Path
    history: list[dict]


def _masked_text_tokens(tokens: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    # zeroed tokens contribute exactly nothing (bias-free key/value maps)
    return tokens * keep[:, None, None].to(tokens.dtype)


def pretrain_generator(
    cfg: PipelineConfig, manifest_path: str | Path, out_dir: str | Path
) -> Path:
    """Desk-scale stand-in for a large pretrained backbone: trains the toy
    autoencoder and a text-conditional denoiser on the corpus, with
    conditioning dropout so the model also handles the unconditional branch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = load_manifest(manifest_path)
    meta = load_corpus_meta(manifest_path)
    set_seed(cfg.seed + 101)
    images = load_image_batch(entries)
    embedder = build_embedder(cfg.embed, cfg.dsp.sample_rate, class_bands_from_meta(meta))
    text_cache = _TextEmbeddingCache(embedder)
    gen = AudioConditionedGenerator(
        cfg.adapter,
        num_slots=cfg.separator.num_sources,
        embed_dim=cfg.embed.dimension,
        text_dim=cfg.embed.dimension,
    )
    sampler = torch.Generator().manual_seed(cfg.seed + 101)

    ae_opt = torch.optim.Adam(gen.autoencoder.parameters(), lr=cfg.pretrain.autoencoder_lr)
    for _ in range(cfg.pretrain.autoencoder_steps):
        idx = torch.randint(0, images.shape[0], (cfg.pretrain.batch_size,), generator=sampler)
        batch = images[idx]
        recon = gen.autoencoder.decode(gen.autoencoder.encode(batch))
        loss = ((recon - batch) ** 2).mean()
        ae_opt.zero_grad()
        loss.backward()
        ae_opt.step()
    with torch.no_grad():
        raw_latents = gen.autoencoder.encode(images)
        gen.latent_mean.fill_(float(raw_latents.mean()))
        gen.latent_std.fill_(float(raw_latents.std()))
        latents = gen.encode_images(images)
        text_tokens = torch.stack(
            [
                torch.stack(
                    [
                        text_cache(p)
                        for p in make_label_phrases(
                            _dedup(e.labels), cfg.separator.num_sources
                        )
                    ]
                )
                for e in entries
            ]
        ).to(torch.float32)

    adapter_names = set(gen.adapter_parameter_names())
    backbone = [
        p
        for name, p in gen.denoiser.named_parameters()
        if f"denoiser.{name}" not in adapter_names and p.requires_grad
    ]
    den_opt = torch.optim.Adam(backbone, lr=cfg.pretrain.denoiser_lr)
    for _ in range(cfg.pretrain.denoiser_steps):
        idx = torch.randint(0, images.shape[0], (cfg.pretrain.batch_size,), generator=sampler)
        keep = (
            torch.rand(len(idx), generator=sampler) >= cfg.adapter.uncond_prob
        )
        tokens = _masked_text_tokens(text_tokens[idx], keep)
        loss = gen.denoise_loss(latents[idx], None, tokens, sampler)
        den_opt.zero_grad()
        loss.backward()
        den_opt.step()
    return save_generator(out / "generator.pt", gen, {"pretrain": True})


def train_stage2(
    cfg: PipelineConfig,
    manifest_path: str | Path,
    stage1_ckpt: str | Path,
    generator_ckpt: str | Path,
    out_dir: str | Path,
    variant: str = "full",
) -> Stage2Result:
    """Adapter training: separations condition the frozen generator through
    the decoupled attention; only the adapter parameters receive updates.
    The text prompt stays empty throughout."""
    if variant not in ("full", "no_decoupled"):
        raise ConfigError(f"unknown stage-2 variant {variant!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = load_manifest(manifest_path)
    meta = load_corpus_meta(manifest_path)
    for e in entries:
        if e.image_path is None:
            raise DataError(f"stage-2 training requires images; {e.audio_path} has none")
    set_seed(cfg.seed + 202)
    separator, _ = load_separator(stage1_ckpt)
    separator.eval()
    separator.requires_grad_(False)
    gen, _ = load_generator(generator_ckpt)
    gen.bypass_audio = variant == "no_decoupled"
    embedder = build_embedder(cfg.embed, cfg.dsp.sample_rate, class_bands_from_meta(meta))

    waves, _ = load_training_set(entries, cfg)
    images = load_image_batch(entries)
    with torch.no_grad():
        conditions = []
        for start in range(0, len(entries), 16):
            sep = separate_batch(separator, waves[start : start + 16], cfg.dsp)
            conditions.append(embedder.embed_audio(sep).to(torch.float32))
        conditions = torch.cat(conditions)
        latents = gen.encode_images(images)

    gen.requires_grad_(False)
    adapter_params = list(gen.adapter_parameters())
    for p in adapter_params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(
        adapter_params,
        lr=cfg.stage2.learning_rate,
        betas=(cfg.stage2.beta1, cfg.stage2.beta2),
        weight_decay=cfg.stage2.weight_decay,
    )
    sampler = torch.Generator().manual_seed(cfg.seed + 202)
    log_path = out / f"stage2_{variant}_log.jsonl"
    history: list[dict] = []
    with log_path.open("w") as log:
        for epoch in range(1, cfg.stage2.epochs + 1):
            order = torch.randperm(len(entries), generator=sampler)
            total, batches = 0.0, 0
            for start in range(0, len(entries), cfg.stage2.batch_size):
                idx = order[start : start + cfg.stage2.batch_size]
                cond = conditions[idx].clone()
                dropped = torch.rand(len(idx), generator=sampler) < cfg.adapter.uncond_prob
                cond[dropped] = 0.0
                loss = gen.denoise_loss(latents[idx], cond, None, sampler)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss)
                batches += 1
                log.write(
                    json.dumps(
                        {
                            "event": "batch",
                            "stage": 2,
                            "epoch": epoch,
                            "size": int(len(idx)),
                            "dropped": int(dropped.sum()),
                        }
                    )
                    + "\n"
                )
            record = {
                "event": "epoch",
                "stage": 2,
                "variant": variant,
                "epoch": epoch,
                "loss": total / max(batches, 1),
            }
            history.append(record)
            log.write(json.dumps(record) + "\n")
    ckpt = save_generator(
        out / f"stage2_{variant}.pt",
        gen,
        {"stage1_ckpt": str(stage1_ckpt), "variant": variant},
    )
    return Stage2Result(ckpt, log_path, history)


def analyze_spread(
    cfg: PipelineConfig, stage1_ckpt: str | Path, manifest_path: str | Path
) -> float:
    """Dataset-averaged spread of label-to-separation similarity scores."""
    from .metrics import semantic_spread

    entries = load_manifest(manifest_path)
    meta = load_corpus_meta(manifest_path)
    separator, _ = load_separator(stage1_ckpt)
    separator.eval()
    embedder = build_embedder(cfg.embed, cfg.dsp.sample_rate, class_bands_from_meta(meta))
    waves, labels = load_training_set(entries, cfg)
    spreads = []
    with torch.no_grad():
        for start in range(0, len(entries), 16):
            chunk = slice(start, min(start + 16, len(entries)))
            sep = separate_batch(separator, waves[chunk], cfg.dsp)
            audio_emb = embedder.embed_audio(sep)
            for offset, labs in enumerate(labels[chunk]):
                phrases = [PHRASE_PREFIX + lab for lab in _dedup(labs)]
                text_emb = torch.stack([embedder.embed_text(p) for p in phrases])
                spreads.append(
                    semantic_spread(text_emb.numpy(), audio_emb[offset].numpy())
                )
    return float(np.mean(spreads))


def run_ablation(
    cfg: PipelineConfig,
    variant: str,
    manifest_path: str | Path,
    workdir: str | Path,
    generator_ckpt: str | Path | None = None,
    full_stage1_ckpt: str | Path | None = None,
):
    """Train and score one harness configuration.

    `no_rank` and `no_contrastive` zero the corresponding stage-1 weight for
    every epoch; `no_decoupled` keeps the full stage-1 model but bypasses the
    audio attention branch, feeding the pooled projected embeddings straight
    into the frozen denoiser features. Returns (MetricReport, artifact paths).
    """
    if variant not in ("full", "no_rank", "no_contrastive", "no_decoupled"):
        raise ConfigError(f"unknown ablation variant {variant!r}")
    workdir = Path(workdir) / variant
    workdir.mkdir(parents=True, exist_ok=True)
    if generator_ckpt is None:
        generator_ckpt = pretrain_generator(cfg, manifest_path, workdir / "pretrain")

    if variant in ("no_rank", "no_contrastive"):
        stage1 = train_stage1(cfg, manifest_path, workdir, variant=variant)
        stage1_ckpt = stage1.checkpoint
    elif full_stage1_ckpt is not None:
        stage1_ckpt = Path(full_stage1_ckpt)
    else:
        stage1_ckpt = train_stage1(cfg, manifest_path, workdir, variant="full").checkpoint

    stage2_variant = "no_decoupled" if variant == "no_decoupled" else "full"
    stage2 = train_stage2(
        cfg, manifest_path, stage1_ckpt, generator_ckpt, workdir, variant=stage2_variant
    )

    entries = load_manifest(manifest_path)
    _, hold = split_holdout(len(entries), cfg.stage2.holdout_fraction)
    eval_entries = [entries[i] for i in hold]
    gen_dir = workdir / "generated"
    generate_images(
        cfg,
        stage1_ckpt,
        stage2.checkpoint,
        [e.audio_path for e in eval_entries],
        gen_dir,
        seed=cfg.seed,
    )
    ref_dir = workdir / "reference"
    ref_dir.mkdir(exist_ok=True)
    import shutil

    for e in eval_entries:
        shutil.copy(e.image_path, ref_dir / f"{e.audio_path.stem}.png")

    from .evaluation import evaluate

    report_path = workdir / "report.json"
    report = evaluate(gen_dir, ref_dir, manifest_path, out_json=report_path)
    paths = {
        "stage1": Path(stage1_ckpt),
        "stage2": stage2.checkpoint,
        "stage2_log": stage2.log_path,
        "generated": gen_dir,
        "reference": ref_dir,
        "report": report_path,
    }
    return report, paths


def generate_images(
    cfg: PipelineConfig,
    stage1_ckpt: str | Path,
    stage2_ckpt: str | Path,
    audio_paths: list[Path],
    out_dir: str | Path,
    steps: int | None = None,
    guidance: float | None = None,
    seed: int = 0,
    text: str | None = None,
) -> list[Path]:
    """Separate each clip, embed, sample latents with guidance, decode, and
    write one PNG per input named after the audio stem."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta_bands = class_bands_from_meta(load_corpus_meta(audio_paths[0])) if audio_paths else {}
    separator, _ = load_separator(stage1_ckpt)
    separator.eval()
    gen, _ = load_generator(stage2_ckpt)
    gen.eval()
    embedder = build_embedder(cfg.embed, cfg.dsp.sample_rate, meta_bands)
    steps = cfg.adapter.sample_steps if steps is None else steps
    guidance = cfg.adapter.guidance if guidance is None else guidance
    waves = torch.stack(
        [
            load_audio(p, cfg.dsp.sample_rate, cfg.dsp.duration_s).samples
            for p in audio_paths
        ]
    )
    with torch.no_grad():
        separations = separate_batch(separator, waves, cfg.dsp)
        audio_emb = embedder.embed_audio(separations).to(torch.float32)
        text_tokens = None
        if text:
            token = embedder.embed_text(text).to(torch.float32)
            text_tokens = token[None, None, :].expand(len(audio_paths), 1, -1)
        rng = torch.Generator().manual_seed(seed)
        latents = gen.sample(audio_emb, text_tokens, steps=steps, guidance=guidance, generator=rng)
        images = gen.decode_latent(latents)
    paths = []
    for i, src in enumerate(audio_paths):
        arr = (images[i].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        dest = out / f"{Path(src).stem}.png"
        Image.fromarray(arr).save(dest)
        paths.append(dest)
    return paths
