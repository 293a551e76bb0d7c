"""Command-line interface: ``cct gen-data | train | eval | probe | pseudo-label``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .checkpoint import CheckpointError, load_checkpoint
from .datasynth import (IGNORE, ConfigError, DatasetSpec, LoadError, generate_dataset, load_image, load_label,
                        read_manifest, write_manifest)
from .evaluate import evaluate
from .probe import probe_images
from .trainer import DomainSpec, TrainConfig, train, train_multidomain
from .weaklabels import PseudoLabelConfig, compute_cam, pseudo_labels

log = logging.getLogger("cct")


class UsageError(Exception):
    """Bad arguments or configuration; exits with status 2."""


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc


def cmd_gen_data(args):
    raw = _read_json(args.spec, "dataset spec")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = DatasetSpec.from_dict(raw)
        spec.validate()
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    generate_dataset(spec, args.out)
    print(Path(args.out) / "manifest.json")


def cmd_train(args):
    try:
        config = TrainConfig.from_json(args.config)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    if config.mode == "cct_multidomain" and not args.data2:
        raise UsageError("mode cct_multidomain needs --data2")
    if config.mode != "cct_multidomain" and args.data2:
        raise UsageError(f"--data2 is only used by cct_multidomain, not {config.mode}")
    num_aux = 0 if config.mode == "supervised_baseline" else len(config.kinds)
    domains = 2 if args.data2 else 1
    print(f"run: mode={config.mode} seed={config.seed} epochs={config.epochs} "
          f"auxiliary decoders={num_aux * domains}")
    if args.data2:
        specs = [DomainSpec("domain1", read_manifest(args.data)), DomainSpec("domain2", read_manifest(args.data2))]
        result = train_multidomain(config, specs, args.out)
    else:
        result = train(config, read_manifest(args.data), args.out)
    print(f"best mIoU {result['best_miou']:.4f}  final mIoU {result['final_miou']:.4f}")
    print(f"checkpoints and metrics written to {result['out_dir']}")


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    if manifest.num_classes() != model.num_classes:
        raise UsageError(f"checkpoint has {model.num_classes} classes, data has {manifest.num_classes()}")
    entries = manifest.entries(args.split)
    if not entries:
        raise UsageError(f"no {args.split!r} entries in {args.data}")
    report = evaluate(model, entries, manifest.root, model.num_classes, multiscale=args.multiscale)
    print(json.dumps(report))


def _probe_items(images_dir):
    """(name, image, label or None) triples, skipping unreadable files with a warning."""
    images_dir = Path(images_dir)
    if (images_dir / "manifest.json").exists():
        manifest = read_manifest(images_dir, check_files=False)
        pairs = [(images_dir / e["image"], images_dir / e["label"] if e.get("label") else None)
                 for e in manifest.entries()]
    else:
        pairs = [(p, None) for p in sorted(images_dir.glob("*.png"))]
    if not pairs:
        raise UsageError(f"no images found in {images_dir}")
    items, failed = [], 0
    for img_path, label_path in pairs:
        try:
            img = load_image(img_path)
            label = load_label(label_path) if label_path is not None else None
        except LoadError as exc:
            log.warning("skipping %s: %s", img_path, exc)
            failed += 1
            continue
        items.append((img_path.name, img, label))
    return items, failed


def cmd_probe(args):
    if args.patch < 1:
        raise UsageError("--patch must be >= 1")
    model = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    items, failed = _probe_items(args.images)
    if not items:
        print(f"all {failed} images failed to load", file=sys.stderr)
        return 1
    rows = probe_images(items, args.out, model, args.patch)
    level = "feature" if model is not None else "input"
    ratios = [r["ratio"] for r in rows[level] if not np.isnan(r["ratio"])]
    summary = f"{len(items)} images probed ({failed} skipped); {level}-level maps"
    if ratios:
        summary += f", mean boundary/interior ratio {np.mean(ratios):.3f}"
    print(summary)
    return 0


def cmd_pseudo_label(args):
    cfg = PseudoLabelConfig(args.theta_bg, args.theta_fg)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model, _ = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    weak = manifest.entries("weak")
    if not weak:
        raise UsageError(f"{args.data} has no weak split")
    if len(weak[0]["image_level"]) != model.num_classes - 1:
        raise UsageError("image-level labels do not match the checkpoint's class count")
    out = manifest.root / "pseudo"
    out.mkdir(exist_ok=True)
    model.eval()
    labeled = ignored = 0
    for entry in weak:
        img = load_image(manifest.root / entry["image"])
        pl = pseudo_labels(compute_cam(model, img, entry["image_level"]), cfg)
        rel = f"pseudo/{Path(entry['image']).stem}.png"
        PILImage.fromarray(pl).save(manifest.root / rel, format="PNG")
        entry["pseudo_label"] = rel
        ignored += int((pl == IGNORE).sum())
        labeled += int((pl != IGNORE).sum())
    write_manifest(manifest, manifest.root / "manifest.json")
    print(f"{len(weak)} pseudo-labels written to {out}: {labeled} labeled pixels, {ignored} ignored")


def build_parser():
    parser = argparse.ArgumentParser(prog="cct", description="Cross-consistency training on synthetic shapes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides the seed in the spec")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--data2", help="second domain for cct_multidomain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU report as JSON on stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", help="manifest split to score (default: val)")
    p.add_argument("--multiscale", action="store_true", help="5-scale + flip averaged inference")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="input- and feature-level smoothness heatmaps")
    p.add_argument("--images", required=True, help="dataset root with manifest.json, or a folder of PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--patch", type=int, default=20)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pseudo-label", help="CAM pseudo-labels for the weak split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--theta-bg", type=float, default=PseudoLabelConfig.theta_bg)
    p.add_argument("--theta-fg", type=float, default=PseudoLabelConfig.theta_fg)
    p.set_defaults(func=cmd_pseudo_label)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (UsageError, ConfigError) as exc:
        print(f"cct {args.command}: {exc}", file=sys.stderr)
        return 2
    except (LoadError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"cct {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
