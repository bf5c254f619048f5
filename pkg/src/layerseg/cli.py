"""Layer segmentation and uncertainty tools: synth, train-seg, train-meta, pipeline, eval, predict.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .dataio import load_samples, preprocess, read_image
from .evaluation import evaluate_segmentation, evaluate_uq
from .losses import WfmseParams
from .metanet import MetaModelConfig, load_metanet
from .metrics import write_seg_report, write_seg_table, write_uq_report
from .render import error_map, overlay, uncertainty_heatmap
from .segnet import SegModelConfig, build_segnet, load_segnet, predict_probs
from .synthgen import PROFILES, DatasetManifest, generate_dataset
from .trainer import ARTIFACTS_ENV, StageConfig, init_backbone, run_pipeline, train_meta, train_segmentation

log = logging.getLogger("layerseg")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _default_out(sub: str) -> Path:
    return Path(os.environ.get(ARTIFACTS_ENV, "artifacts")) / sub


def _write_rgb(path: Path, rgb: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def cmd_synth(args) -> int:
    out = Path(args.out) if args.out else _default_out("data")
    manifest = generate_dataset(args.profile, args.count, tuple(args.splits), args.seed, out, args.canvas)
    print(out / "manifest.json")
    n = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    log.info("wrote %d samples (%s)", args.count, ", ".join(f"{k} {v}" for k, v in n.items()))
    return 0


def _seg_model_from_init(args):
    """Returns (model, normalization mode) for --init."""
    config = SegModelConfig(args.backbone, input_size=args.input_size) if args.backbone != "tiny" \
        else SegModelConfig.tiny(args.input_size)
    init = args.init
    if init in ("random", "synthetic"):
        weights, _ = init_backbone(init, config.backbone, args.seed)
        return build_segnet(config, weights), "dataset"
    try:
        header, _ = load_checkpoint(init)
    except CheckpointError:
        header = None
    if header is not None and header["kind"] == "segmentation":
        model, _ = load_segnet(init)
        return model, "dataset"
    weights, prov = init_backbone(init, config.backbone, args.seed)
    return build_segnet(config, weights), "imagenet" if prov["source"] == "external" else "dataset"


def cmd_train_seg(args) -> int:
    out = Path(args.out) if args.out else _default_out(f"stage{args.stage}")
    manifest = DatasetManifest.load(args.manifest)
    model, norm = _seg_model_from_init(args)
    cfg = StageConfig.segmentation(str(args.stage), epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                                   seed=args.seed, augment=not args.no_augment, normalization=norm,
                                   accumulate=args.accumulate)
    path, _ = train_segmentation(model, manifest, cfg, out, f"stage{args.stage}")
    print(path)
    return 0


def cmd_train_meta(args) -> int:
    out = Path(args.out) if args.out else _default_out("meta")
    manifest = DatasetManifest.load(args.manifest)
    seg, _ = load_segnet(args.seg_checkpoint)
    size = seg.config.input_size
    mcfg = MetaModelConfig.tiny(size, seg.config.num_classes) if args.meta_preset == "tiny" \
        else MetaModelConfig(in_channels=seg.config.num_classes, input_size=size)
    cfg = StageConfig.meta(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                           accumulate=args.accumulate)
    wf = WfmseParams(args.e_correct, args.e_incorrect, args.beta, args.gamma)
    path, _ = train_meta(seg, manifest, cfg, wf, out, mcfg)
    print(path)
    return 0


def cmd_pipeline(args) -> int:
    out = run_pipeline(args.config, args.out)
    print(out / "reports")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else _default_out("reports")
    manifest = DatasetManifest.load(args.manifest)
    seg, _ = load_segnet(args.seg_checkpoint)
    size = seg.config.input_size
    samples = load_samples(manifest, args.split, size)
    report = evaluate_segmentation(seg, samples, label=args.label)
    write_seg_report(report, out)
    write_seg_table([report], out / "seg_table.csv")
    if args.meta_checkpoint:
        meta, _ = load_metanet(args.meta_checkpoint)
        val = [] if args.tau is not None else load_samples(manifest, "val", size)
        uq = evaluate_uq(seg, meta, val, samples, tau=args.tau, label=args.label)
        write_uq_report(uq, out)
    print(out)
    return 0


def _predict_inputs(args, size):
    """Yield (name, sample or exception, has_gt)."""
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        for entry in manifest.split(args.split):
            name = Path(entry["image"]).stem
            try:
                image = read_image(manifest.resolve(entry["image"]))
                mask = read_image(manifest.resolve(entry["mask"]), cv2.IMREAD_GRAYSCALE).astype(np.int64)
                yield name, preprocess(image, mask, size), True
            except Exception as e:  # reported per file
                yield name, e, True
        return
    masks = args.masks or []
    for i, path in enumerate(args.images):
        name = Path(path).stem
        try:
            image = read_image(Path(path))
            if masks:
                mask = read_image(Path(masks[i]), cv2.IMREAD_GRAYSCALE).astype(np.int64)
            else:
                mask = np.zeros(image.shape[:2], dtype=np.int64)
            yield name, preprocess(image, mask, size), bool(masks)
        except Exception as e:
            yield name, e, bool(masks)


def cmd_predict(args) -> int:
    out = Path(args.out) if args.out else _default_out("predictions")
    out.mkdir(parents=True, exist_ok=True)
    seg, _ = load_segnet(args.seg_checkpoint)
    meta = load_metanet(args.meta_checkpoint)[0] if args.meta_checkpoint else None
    failures = 0
    for name, sample, has_gt in _predict_inputs(args, seg.config.input_size):
        if isinstance(sample, Exception):
            print(f"error: {name}: {sample}", file=sys.stderr)
            failures += 1
            continue
        x = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))[None]
        probs = predict_probs(seg, x)
        pred = probs.argmax(1)[0].numpy()
        cv2.imwrite(str(out / f"{name}_mask.png"), pred.astype(np.uint8))
        _write_rgb(out / f"{name}_overlay.png", overlay(sample.image, pred))
        if meta is not None:
            with torch.no_grad():
                soft = meta(probs)[0].numpy()
            _write_rgb(out / f"{name}_uncertainty.png", uncertainty_heatmap(soft))
        if has_gt:
            _write_rgb(out / f"{name}_error.png", error_map(pred, sample.mask))
    print(out)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--profile", choices=sorted(PROFILES), default="agr567like")
    s.add_argument("--count", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--canvas", type=int, default=512)
    s.add_argument("--splits", type=float, nargs=3, default=(0.64, 0.16, 0.20), metavar=("TRAIN", "VAL", "TEST"))
    s.set_defaults(func=cmd_synth)

    def training_flags(sp, lr, batch):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out")
        sp.add_argument("--epochs", type=_positive_int, default=50)
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--batch-size", type=_positive_int, default=batch)
        sp.add_argument("--accumulate", type=_positive_int, default=1)
        sp.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train-seg", help="train or fine-tune the segmentation model")
    training_flags(t, 1e-3, 4)
    t.add_argument("--stage", type=int, choices=(2, 3), default=3)
    t.add_argument("--init", default="random",
                   help="random | synthetic | backbone weights file | segmentation checkpoint to fine-tune")
    t.add_argument("--backbone", choices=("tiny", "resnet50", "resnet152"), default="tiny")
    t.add_argument("--input-size", type=_positive_int, default=64)
    t.add_argument("--no-augment", action="store_true")
    t.set_defaults(func=cmd_train_seg)

    m = sub.add_parser("train-meta", help="train the meta-model on a frozen segmentation model")
    training_flags(m, 1e-4, 16)
    m.add_argument("--seg-checkpoint", required=True)
    m.add_argument("--meta-preset", choices=("tiny", "default"), default="tiny")
    m.add_argument("--e-correct", type=float, default=1.0)
    m.add_argument("--e-incorrect", type=float, default=8.0)
    m.add_argument("--beta", type=float, default=20.0)
    m.add_argument("--gamma", type=float, default=1.0)
    m.set_defaults(func=cmd_train_meta)

    pl = sub.add_parser("pipeline", help="run all training stages and evaluation from a config file")
    pl.add_argument("--config", required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_pipeline)

    e = sub.add_parser("eval", help="write segmentation (and uncertainty) reports")
    e.add_argument("--seg-checkpoint", required=True)
    e.add_argument("--meta-checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--tau", type=float, help="override the threshold calibrated on the val split")
    e.add_argument("--label", default="")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write masks, overlays, uncertainty and error maps")
    pr.add_argument("--seg-checkpoint", required=True)
    pr.add_argument("--meta-checkpoint")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", nargs="+")
    src.add_argument("--manifest")
    pr.add_argument("--masks", nargs="+", help="ground-truth masks matching --images")
    pr.add_argument("--split", choices=("train", "val", "test"), default="test")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "tau", None) is not None and not -1.0 <= args.tau <= 1.0:
        parser.error("--tau must lie in [-1, 1]")
    if getattr(args, "masks", None) and not getattr(args, "images", None):
        parser.error("--masks requires --images")
    if getattr(args, "masks", None) and len(args.masks) != len(args.images):
        parser.error("--masks must match --images one to one")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(getattr(args, "seed", 0))
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
