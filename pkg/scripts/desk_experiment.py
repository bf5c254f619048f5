#!/usr/bin/env python3
"""Desk-scale experiment: stage 2 on agr2like, stage 3 on agr567like, then the meta-model.

Prints a segmentation table before and after fine-tuning plus the detection
measures, and writes everything under --out. Runs in a few minutes on one CPU core
with the defaults.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from layerseg.dataio import load_samples
from layerseg.evaluation import evaluate_segmentation, evaluate_uq
from layerseg.losses import WfmseParams
from layerseg.metanet import MetaModelConfig, load_metanet
from layerseg.metrics import write_seg_table, write_uq_report
from layerseg.segnet import SegModelConfig, build_segnet
from layerseg.synthgen import generate_dataset
from layerseg.trainer import StageConfig, init_backbone, train_meta, train_segmentation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("artifacts/desk"))
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--source-count", type=int, default=200)
    ap.add_argument("--target-count", type=int, default=312)
    ap.add_argument("--stage2-epochs", type=int, default=20)
    ap.add_argument("--stage3-epochs", type=int, default=15)
    ap.add_argument("--meta-epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    source = generate_dataset("agr2like", args.source_count, (1.0, 0.0, 0.0), args.seed + 1,
                              args.out / "data" / "agr2like", args.size)
    target = generate_dataset("agr567like", args.target_count, (0.64, 0.16, 0.20), args.seed + 2,
                              args.out / "data" / "agr567like", args.size)
    val = load_samples(target, "val", args.size)
    test = load_samples(target, "test", args.size)

    weights, _ = init_backbone("random", "tiny", args.seed)
    model = build_segnet(SegModelConfig.tiny(args.size), weights)
    ckpt = args.out / "checkpoints"
    train_segmentation(model, source, StageConfig.segmentation("2", epochs=args.stage2_epochs, seed=args.seed),
                       ckpt, "stage2")
    before = evaluate_segmentation(model, test, label="w/o FT")
    seg_path, _ = train_segmentation(model, target, StageConfig.segmentation("3", epochs=args.stage3_epochs,
                                                                              seed=args.seed), ckpt, "stage3")
    after = evaluate_segmentation(model, test, label="w/ FT")
    meta_path, _ = train_meta(model, target, StageConfig.meta(epochs=args.meta_epochs, seed=args.seed),
                              WfmseParams(), ckpt, MetaModelConfig.tiny(args.size))
    uq = evaluate_uq(model, load_metanet(meta_path)[0], val, test, label="w/ FT")

    reports = args.out / "reports"
    write_seg_table([before, after], reports / "seg_table.csv")
    write_uq_report(uq, reports)
    print(f"{'':8s}" + "".join(f"{n:>8s}" for n in ("BG", "Kernel", "Buffer", "IPyC", "SiC", "OPyC", "All")))
    for r in (before, after):
        print(f"{r.label:8s}" + "".join(f"{v:8.3f}" for v in (*r.iou, r.miou)))
    print(json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in uq.to_dict().items()
                      if k != "counts"}, indent=1))
    print(f"total {time.perf_counter() - t0:.0f} s; outputs in {args.out}")


if __name__ == "__main__":
    main()
