"""Synthetic desk-scale corpus: band-limited audio classes paired with
rendered images, plus the line-delimited JSON manifest.

Every class owns a frequency band disjoint from all others, which makes a
brute-force band-pass separation oracle possible, and a canvas region/color,
which gives the toy image extractors something class-specific to read.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.io import wavfile

from .config import DspConfig
from .errors import DataError

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "corpus.json"


@dataclass(frozen=True)
class CorpusClass:
    name: str
    band: tuple[float, float]  # Hz, disjoint across classes
    kind: str  # "tone" or "noise"
    color: tuple[float, float, float]
    region: int  # canvas quadrant index 0..3


@dataclass
class SyntheticCorpusSpec:
    classes: list[CorpusClass]
    items_per_class: int = 50
    sources_per_item: int = 2
    amp_range: tuple[float, float] = (0.4, 1.0)
    seed: int = 0
    image_size: int = 32
    sample_rate: int = 2000
    duration_s: float = 2.0

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise DataError("corpus needs at least 2 classes")
        if not 1 <= self.sources_per_item <= len(self.classes):
            raise DataError("sources_per_item must be between 1 and the class count")
        bands = sorted(c.band for c in self.classes)
        for (lo1, hi1), (lo2, hi2) in zip(bands, bands[1:]):
            if hi1 >= lo2:
                raise DataError(f"class bands overlap: ({lo1},{hi1}) and ({lo2},{hi2})")


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: Path
    labels: tuple[str, ...]
    image_path: Path | None = None


def default_corpus_spec(seed: int = 0, items_per_class: int = 50) -> SyntheticCorpusSpec:
    classes = [
        CorpusClass("chime", (100.0, 220.0), "tone", (0.9, 0.2, 0.2), 0),
        CorpusClass("horn", (300.0, 420.0), "tone", (0.2, 0.9, 0.2), 1),
        CorpusClass("whistle", (500.0, 620.0), "tone", (0.25, 0.35, 0.95), 2),
        CorpusClass("static", (700.0, 850.0), "noise", (0.95, 0.85, 0.2), 3),
    ]
    return SyntheticCorpusSpec(classes=classes, items_per_class=items_per_class, seed=seed)


def synthesize_source(cls: CorpusClass, spec: SyntheticCorpusSpec, rng: np.random.Generator) -> np.ndarray:
    n = int(round(spec.sample_rate * spec.duration_s))
    t = np.arange(n) / spec.sample_rate
    amp = rng.uniform(*spec.amp_range)
    if cls.kind == "tone":
        freq = rng.uniform(cls.band[0] + 5.0, cls.band[1] - 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        tremolo = 1.0 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t)
        x = np.sin(2 * np.pi * freq * t + phase) * tremolo
    elif cls.kind == "noise":
        white = rng.normal(size=n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / spec.sample_rate)
        spectrum[(freqs < cls.band[0]) | (freqs > cls.band[1])] = 0.0
        x = np.fft.irfft(spectrum, n=n)
        x = x / (np.abs(x).max() + 1e-12)
    else:
        raise DataError(f"unknown source kind {cls.kind!r}")
    return (amp * x).astype(np.float64)


def render_image(
    classes: list[CorpusClass], size: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw each class's shape in its canvas region with seeded jitter.
    Returns float64 (H, W, 3) in [0, 1]."""
    img = Image.new("RGB", (size, size), (18, 18, 24))
    draw = ImageDraw.Draw(img)
    half = size // 2
    corners = {0: (0, 0), 1: (half, 0), 2: (0, half), 3: (half, half)}
    for cls in classes:
        cx0, cy0 = corners[cls.region]
        jitter = rng.integers(-2, 3, size=2)
        cx = cx0 + half // 2 + int(jitter[0])
        cy = cy0 + half // 2 + int(jitter[1])
        r = half // 2 - 2 + int(rng.integers(-1, 2))
        color = tuple(int(255 * c) for c in cls.color)
        box = (cx - r, cy - r, cx + r, cy + r)
        shape = ["ellipse", "rectangle"][cls.region % 2]
        if shape == "ellipse":
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
    return np.asarray(img, dtype=np.float64) / 255.0


def generate_corpus(spec: SyntheticCorpusSpec, out_dir: str | Path) -> Path:
    """Write mixture WAVs, paired images, the manifest, and corpus metadata.
    Fully determined by the spec's seed; returns the manifest path."""
    spec.validate()
    out = Path(out_dir)
    audio_dir = out / "audio"
    image_dir = out / "images"
    audio_dir.mkdir(parents=True, exist_ok=True)
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    by_name = {c.name: c for c in spec.classes}
    entries = []
    total = len(spec.classes) * spec.items_per_class
    for idx in range(total):
        # interleave primary classes so any contiguous split is class-balanced
        primary = spec.classes[idx % len(spec.classes)]
        others = [c.name for c in spec.classes if c.name != primary.name]
        partners = list(rng.choice(others, size=spec.sources_per_item - 1, replace=False))
        names = [primary.name] + partners
        mix = np.zeros(int(round(spec.sample_rate * spec.duration_s)))
        for name in names:
            mix = mix + synthesize_source(by_name[name], spec, rng)
        stem = f"item_{idx:05d}"
        audio_path = audio_dir / f"{stem}.wav"
        wavfile.write(audio_path, spec.sample_rate, mix.astype(np.float32))
        image = render_image([by_name[n] for n in names], spec.image_size, rng)
        image_path = image_dir / f"{stem}.png"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(image_path)
        entries.append(
            {
                "audio_path": str(audio_path.relative_to(out)),
                "labels": names,
                "image_path": str(image_path.relative_to(out)),
            }
        )
    manifest = out / MANIFEST_NAME
    with manifest.open("w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")
    meta = {
        "classes": [dataclasses.asdict(c) for c in spec.classes],
        "items_per_class": spec.items_per_class,
        "sources_per_item": spec.sources_per_item,
        "seed": spec.seed,
        "image_size": spec.image_size,
        "sample_rate": spec.sample_rate,
        "duration_s": spec.duration_s,
    }
    (out / META_NAME).write_text(json.dumps(meta, indent=2))
    return manifest


def load_manifest(manifest_path: str | Path) -> list[ManifestEntry]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest {manifest_path} does not exist")
    root = manifest_path.parent
    entries = []
    for line_no, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        record = json.loads(line)
        audio = root / record["audio_path"]
        if not audio.exists():
            raise DataError(f"manifest line {line_no}: missing audio file {audio}")
        image = None
        if record.get("image_path"):
            image = root / record["image_path"]
            if not image.exists():
                raise DataError(f"manifest line {line_no}: missing image file {image}")
        entries.append(ManifestEntry(audio, tuple(record["labels"]), image))
    if not entries:
        raise DataError(f"manifest {manifest_path} is empty")
    return entries


def load_corpus_meta(path: str | Path) -> dict | None:
    """Find corpus metadata next to a manifest, corpus file, or clip path."""
    for base in (Path(path).parent, Path(path).parent.parent):
        meta_path = base / META_NAME
        if meta_path.exists():
            return json.loads(meta_path.read_text())
    return None


def class_bands_from_meta(meta: dict | None) -> dict[str, tuple[float, float]]:
    if not meta:
        return {}
    return {c["name"]: tuple(c["band"]) for c in meta["classes"]}


def dsp_config_from_meta(meta: dict, frame_length: int = 128, hop: int = 32) -> DspConfig:
    return DspConfig(
        sample_rate=meta["sample_rate"],
        duration_s=meta["duration_s"],
        frame_length=frame_length,
        hop=hop,
    )
