"""Command-line surface.

Subcommands: gen-corpus, train-stage1, train-stage2, separate, generate,
evaluate, ablate, analyze-spread. Every command accepts --config (YAML),
--seed, and --out where applicable.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import evaluation, train
from .config import load_config
from .dsp import load_audio
from .separator import load_separator, separate


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")


def _cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.embed.seed = args.seed
    return cfg


def _cmd_gen_corpus(args) -> int:
    cfg = _cfg(args)
    spec = corpus_mod.default_corpus_spec(seed=cfg.seed, items_per_class=args.items_per_class)
    spec.sample_rate = cfg.dsp.sample_rate
    spec.duration_s = cfg.dsp.duration_s
    manifest = corpus_mod.generate_corpus(spec, args.out)
    print(f"wrote corpus manifest to {manifest}")
    return 0


def _rotated_manifest(manifest: Path, fold: int, folds: int, out_dir: Path) -> Path:
    entries = corpus_mod.load_manifest(manifest)
    shift = fold * (len(entries) // folds)
    rotated = entries[shift:] + entries[:shift]
    dest = out_dir / "manifest.jsonl"
    out_dir.mkdir(parents=True, exist_ok=True)
    with dest.open("w") as fh:
        for e in rotated:
            fh.write(
                json.dumps(
                    {
                        "audio_path": str(e.audio_path.resolve()),
                        "labels": list(e.labels),
                        "image_path": str(e.image_path.resolve()) if e.image_path else None,
                    }
                )
                + "\n"
            )
    meta = manifest.parent / corpus_mod.META_NAME
    if meta.exists():
        shutil.copy(meta, out_dir / corpus_mod.META_NAME)
    return dest


def _cmd_train_stage1(args) -> int:
    cfg = _cfg(args)
    if args.folds > 1:
        for fold in range(args.folds):
            fold_dir = Path(args.out) / f"fold_{fold}"
            manifest = _rotated_manifest(args.manifest, fold, args.folds, fold_dir)
            result = train.train_stage1(cfg, manifest, fold_dir, variant=args.variant)
            print(f"fold {fold}: checkpoint {result.checkpoint}")
        return 0
    result = train.train_stage1(cfg, args.manifest, args.out, variant=args.variant)
    print(f"stage-1 checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")
    return 0


def _cmd_train_stage2(args) -> int:
    cfg = _cfg(args)
    generator = args.generator
    if generator is None:
        generator = train.pretrain_generator(cfg, args.manifest, Path(args.out) / "pretrain")
        print(f"pretrained generator backbone: {generator}")
    result = train.train_stage2(
        cfg, args.manifest, args.stage1, generator, args.out, variant=args.variant
    )
    print(f"stage-2 checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")
    return 0


def _cmd_separate(args) -> int:
    cfg = _cfg(args)
    from scipy.io import wavfile

    model, _ = load_separator(args.stage1)
    wave = load_audio(args.audio, cfg.dsp.sample_rate, cfg.dsp.duration_s)
    parts = separate(model, wave, cfg.dsp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.audio).stem
    for i, part in enumerate(parts):
        dest = out / f"{stem}_source{i}.wav"
        wavfile.write(dest, wave.sample_rate, part.samples.numpy().astype("float32"))
        print(f"wrote {dest}")
    return 0


def _cmd_generate(args) -> int:
    cfg = _cfg(args)
    paths = train.generate_images(
        cfg,
        args.stage1,
        args.stage2,
        [Path(p) for p in args.audio],
        args.out,
        steps=args.steps,
        guidance=args.guidance,
        seed=cfg.seed if args.seed is None else args.seed,
        text=args.text,
    )
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_evaluate(args) -> int:
    _cfg(args)
    report = evaluation.evaluate(
        args.generated,
        args.reference,
        args.manifest,
        out_json=args.out_json,
        plot_path=args.plot,
    )
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _cfg(args)
    report, paths = train.run_ablation(
        cfg,
        args.variant,
        args.manifest,
        args.out,
        generator_ckpt=args.generator,
        full_stage1_ckpt=args.full_stage1,
    )
    print(json.dumps(report.to_dict(), indent=2))
    print(f"artifacts under {paths['report'].parent}")
    return 0


def _cmd_analyze_spread(args) -> int:
    cfg = _cfg(args)
    value = train.analyze_spread(cfg, args.stage1, args.manifest)
    print(f"semantic spread: {value:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepgen")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write the synthetic corpus")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--items-per-class", type=int, default=50)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("train-stage1", help="train the separator")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", default="full", choices=train.STAGE1_VARIANTS)
    p.add_argument("--folds", type=int, default=1)
    p.set_defaults(func=_cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the conditioning adapter")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--stage1", type=Path, required=True)
    p.add_argument("--generator", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", default="full", choices=("full", "no_decoupled"))
    p.set_defaults(func=_cmd_train_stage2)

    p = sub.add_parser("separate", help="separate one clip into sources")
    _common(p)
    p.add_argument("--audio", type=Path, required=True)
    p.add_argument("--stage1", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_separate)

    p = sub.add_parser("generate", help="generate images from audio clips")
    _common(p)
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--stage1", type=Path, required=True)
    p.add_argument("--stage2", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--text", default=None, help="optional text prompt")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="compute the metric report")
    _common(p)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-json", type=Path, default=None)
    p.add_argument("--plot", type=Path, default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score one ablation variant")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument(
        "--variant",
        required=True,
        choices=("full", "no_rank", "no_contrastive", "no_decoupled"),
    )
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--generator", type=Path, default=None)
    p.add_argument("--full-stage1", type=Path, default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("analyze-spread", help="label-to-separation similarity spread")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--stage1", type=Path, required=True)
    p.set_defaults(func=_cmd_analyze_spread)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
