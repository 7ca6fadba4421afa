"""Metric-suite orchestration over directories of generated and reference
images plus the audio manifest.

Two toy extractors stand in for the large pretrained feature models: a
"perceptual" extractor over local image statistics (drives FID/KID) and a
joint class-presence extractor whose audio and image paths share one
projection (drives CLIP-FID, IIS, and AIS). Both are seeded projections, so
reports are deterministic and a real extractor can be swapped in behind the
same interface.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpus import class_bands_from_meta, load_corpus_meta, load_manifest
from .errors import PairingError
from .metrics import (
    FeatureSet,
    ImageFeatureExtractor,
    MetricReport,
    fid,
    kid,
    pairwise_similarity,
)
from .train import load_image_array


class ToyPerceptualExtractor(ImageFeatureExtractor):
    """Seeded projection of pooled local color statistics."""

    def __init__(self, dim: int = 32, grid: int = 4, seed: int = 11):
        self.extractor_id = f"toy-perceptual-{dim}-g{grid}-s{seed}"
        self.grid = grid
        rng = np.random.default_rng(seed)
        raw = grid * grid * 3 + 3
        self.proj = rng.normal(size=(dim, raw)) / np.sqrt(raw)

    def _stats(self, images: np.ndarray) -> np.ndarray:
        n, h, w, _ = images.shape
        g = self.grid
        pooled = images.reshape(n, g, h // g, g, w // g, 3).mean(axis=(2, 4))
        cell = pooled.reshape(n, -1)
        spread = images.std(axis=(1, 2))
        return np.concatenate([cell, spread], axis=1)

    def image_features(self, images: np.ndarray) -> FeatureSet:
        return FeatureSet(self._stats(np.asarray(images)) @ self.proj.T, self.extractor_id)


class ToyJointExtractor(ImageFeatureExtractor):
    """Class-presence features shared between images and audio.

    Image side scores each corpus class by how strongly its color shows up in
    its canvas region; audio side scores each class by its band's share of the
    spectrum. Both score vectors go through the same projection, so audio and
    images of the same scene land close together.
    """

    def __init__(self, classes: list[dict], sample_rate: int, dim: int = 32, seed: int = 23):
        self.extractor_id = f"toy-joint-{dim}-s{seed}"
        self.classes = classes
        self.sample_rate = sample_rate
        rng = np.random.default_rng(seed)
        self.proj = rng.normal(size=(dim, len(classes))) / np.sqrt(len(classes))

    def _image_scores(self, images: np.ndarray) -> np.ndarray:
        n, h, w, _ = images.shape
        half = h // 2
        corners = {0: (0, 0), 1: (0, half), 2: (half, 0), 3: (half, half)}
        scores = np.zeros((n, len(self.classes)))
        for k, cls in enumerate(self.classes):
            r0, c0 = corners[cls["region"]]
            patch = images[:, r0 : r0 + half, c0 : c0 + half, :]
            color = np.asarray(cls["color"])
            color = color / np.linalg.norm(color)
            scores[:, k] = (patch @ color).mean(axis=(1, 2))
        return scores

    def _audio_scores(self, clips: np.ndarray) -> np.ndarray:
        spectrum = np.abs(np.fft.rfft(clips, axis=-1)) ** 2
        freqs = np.fft.rfftfreq(clips.shape[-1], d=1.0 / self.sample_rate)
        total = spectrum.sum(axis=-1, keepdims=True) + 1e-12
        scores = np.zeros((clips.shape[0], len(self.classes)))
        for k, cls in enumerate(self.classes):
            lo, hi = cls["band"]
            mask = (freqs >= lo) & (freqs <= hi)
            scores[:, k] = (spectrum[:, mask].sum(axis=-1) / total[:, 0])
        return scores

    @staticmethod
    def _embed(scores: np.ndarray, proj: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(scores, axis=1, keepdims=True) + 1e-9
        return (scores / norm) @ proj.T

    def image_features(self, images: np.ndarray) -> FeatureSet:
        return FeatureSet(self._embed(self._image_scores(np.asarray(images)), self.proj), self.extractor_id)

    def audio_features(self, clips: np.ndarray) -> FeatureSet:
        return FeatureSet(self._embed(self._audio_scores(np.asarray(clips)), self.proj), self.extractor_id)


def _collect_images(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(Path(directory).glob("*.png"))}


def evaluate(
    gen_dir: str | Path,
    ref_dir: str | Path,
    manifest_path: str | Path,
    out_json: str | Path | None = None,
    plot_path: str | Path | None = None,
) -> MetricReport:
    """Compute the full seven-metric report over aligned image sets.

    Pairing is by file stem; each stem must exist in both directories and in
    the audio manifest.
    """
    from scipy.io import wavfile

    gen = _collect_images(Path(gen_dir))
    ref = _collect_images(Path(ref_dir))
    for stem in sorted(set(gen) | set(ref)):
        if stem not in gen:
            raise PairingError(f"generated image missing for {stem}")
        if stem not in ref:
            raise PairingError(f"reference image missing for {stem}")
    if not gen:
        raise PairingError("no images to evaluate")

    entries = {e.audio_path.stem: e for e in load_manifest(manifest_path)}
    meta = load_corpus_meta(manifest_path)
    if meta is None:
        raise PairingError(f"corpus metadata not found next to {manifest_path}")
    stems = sorted(gen)
    missing_audio = [s for s in stems if s not in entries]
    if missing_audio:
        raise PairingError(f"audio manifest entry missing for {missing_audio[0]}")

    gen_imgs = np.stack([load_image_array(gen[s]) for s in stems])
    ref_imgs = np.stack([load_image_array(ref[s]) for s in stems])
    clips = np.stack(
        [wavfile.read(entries[s].audio_path)[1].astype(np.float64) for s in stems]
    )

    perceptual = ToyPerceptualExtractor()
    joint = ToyJointExtractor(meta["classes"], meta["sample_rate"])

    real_p = perceptual.image_features(ref_imgs)
    gen_p = perceptual.image_features(gen_imgs)
    real_j = joint.image_features(ref_imgs)
    gen_j = joint.image_features(gen_imgs)
    audio_j = joint.audio_features(clips)

    iis = pairwise_similarity(gen_j, real_j)
    ais = pairwise_similarity(audio_j, gen_j)
    report = MetricReport(
        fid=fid(real_p, gen_p),
        clip_fid=fid(real_j, gen_j),
        kid=kid(real_p, gen_p),
        ais=ais.mean,
        ais_z=ais.mean_z,
        iis=iis.mean,
        iis_z=iis.mean_z,
        num_generated=len(stems),
        num_reference=len(stems),
        extractor_ids={
            "perceptual": perceptual.extractor_id,
            "joint": joint.extractor_id,
        },
    )
    if out_json is not None:
        Path(out_json).parent.mkdir(parents=True, exist_ok=True)
        Path(out_json).write_text(json.dumps(report.to_dict(), indent=2))
    if plot_path is not None:
        _plot_report(report, Path(plot_path))
    return report


def _plot_report(report: MetricReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["fid", "clip_fid", "kid", "ais", "ais_z", "iis", "iis_z"]
    values = [getattr(report, n) for n in names]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(names, values, color="#4878cf")
    ax.set_ylabel("value")
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
