"""Three-stage segmentation training, meta-model training and the full pipeline."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import save_checkpoint, state_checksum
from .core_types import NUM_CLASSES, ImageSample
from .dataio import AugmentPolicy, Normalizer, iterate_batches, load_samples
from .evaluation import collect_soft_labels, evaluate_segmentation, evaluate_uq
from .losses import WfmseParams, dice_loss, error_weights, soft_label_targets, wfmse_loss
from .metanet import MetaModelConfig, build_metanet, load_metanet, save_metanet
from .metrics import average_precision, write_seg_report, write_seg_table, write_uq_report
from .segnet import (BACKBONES, ResNetEncoder, SegModelConfig, SegNet, build_segnet, load_segnet,
                     read_backbone_file, save_segnet)
from .synthgen import SPLITS, DatasetManifest, generate_dataset, get_profile, render_particle, sample_particle_spec

log = logging.getLogger(__name__)

ARTIFACTS_ENV = "LAYERSEG_ARTIFACTS"


class TrainingDivergedError(RuntimeError):
    pass


class FreezeViolationError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: str  # "1" | "2" | "3" | "meta"
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 4
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    augment: bool = True
    validate: bool = True
    seed: int = 0
    accumulate: int = 1  # gradient accumulation steps per optimizer step
    normalization: str = "dataset"  # "dataset" | "keep" | "imagenet"

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau factor must be in (0, 1)")
        if self.accumulate <= 0 or self.batch_size % self.accumulate:
            raise ValueError("accumulation steps must divide the batch size")

    @classmethod
    def segmentation(cls, stage: str = "3", **kw) -> "StageConfig":
        kw.setdefault("validate", stage != "2")
        return cls(stage=stage, **kw)

    @classmethod
    def meta(cls, **kw) -> "StageConfig":
        defaults = dict(lr=1e-4, batch_size=16, augment=False)
        defaults.update(kw)
        return cls(stage="meta", **defaults)


@dataclass
class TrainLog:
    records: list[dict[str, Any]] = field(default_factory=list)
    info: dict[str, Any] = field(default_factory=dict)

    def append(self, **record) -> None:
        if self.records and record["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError("epochs must be recorded contiguously")
        self.records.append(record)

    @property
    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.records]

    def write_jsonl(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            f.write(json.dumps({"info": self.info}, sort_keys=True) + "\n")
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        return path


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its loss is below the best so far by more than ``threshold``.
    """

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def reproducibility_mode() -> str:
    return "deterministic" if torch.are_deterministic_algorithms_enabled() else "nondeterministic"


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


# -- stage one ---------------------------------------------------------------

class _PatchClassifier(nn.Module):
    def __init__(self, backbone: str, num_classes: int):
        super().__init__()
        self.encoder = ResNetEncoder(BACKBONES[backbone])
        self.fc = nn.Linear(BACKBONES[backbone].stage_channels[3], num_classes)
        norm = Normalizer()
        self.register_buffer("mean", torch.tensor(norm.mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(norm.std).view(1, 3, 1, 1))

    def forward(self, x):
        feats = self.encoder((x - self.mean) / self.std)[-1]
        return self.fc(feats.mean((2, 3)))


def _patch_set(rng: np.random.Generator, n_images: int, per_image: int, canvas: int, patch: int):
    profiles = [get_profile("agr2like"), get_profile("agr567like")]
    xs, ys = [], []
    half = patch // 2
    for i in range(n_images):
        spec = sample_particle_spec(rng, profiles[i % 2], canvas)
        s = render_particle(spec, canvas, rng)
        img = np.pad(s.image, ((half, half), (half, half), (0, 0)), mode="edge")
        # balance classes: draw centers per class where possible
        for _ in range(per_image):
            c = int(rng.integers(0, NUM_CLASSES))
            where = np.argwhere(s.mask == c)
            if len(where) == 0:
                where = np.argwhere(s.mask >= 0)
            y, x = where[rng.integers(len(where))]
            xs.append(img[y:y + patch, x:x + patch].transpose(2, 0, 1))
            ys.append(s.mask[y, x])
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.asarray(ys, dtype=np.int64))


def synthetic_pretrain(backbone: str = "tiny", seed: int = 0, n_images: int = 40, per_image: int = 60,
                       canvas: int = 64, patch: int = 32, epochs: int = 8, lr: float = 1e-3) -> tuple[dict, float]:
    """Pretrain a backbone on patch-centre layer classification of synthetic particles.

    Returns (encoder state dict, held-out patch accuracy).
    """
    rng = np.random.default_rng(seed)
    x_train, y_train = _patch_set(rng, n_images, per_image, canvas, patch)
    x_test, y_test = _patch_set(rng, max(n_images // 4, 2), per_image, canvas, patch)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _PatchClassifier(backbone, NUM_CLASSES)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        gen = torch.Generator().manual_seed(seed)
        for _ in range(epochs):
            model.train()
            for idx in torch.randperm(len(x_train), generator=gen).split(32):
                opt.zero_grad()
                loss = nn.functional.cross_entropy(model(x_train[idx]), y_train[idx])
                loss.backward()
                opt.step()
        model.eval()
        with torch.no_grad():
            acc = float((model(x_test).argmax(1) == y_test).float().mean())
    return model.encoder.state_dict(), acc


def init_backbone(source: str | os.PathLike = "random", backbone: str = "tiny", seed: int = 0,
                  **pretrain_kw) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Stage one: backbone weights from an external file, a synthetic pretrain, or a seed.

    Returns (encoder state dict, provenance record).
    """
    if source == "random":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = ResNetEncoder(BACKBONES[backbone])
        return enc.state_dict(), {"source": "random", "seed": seed}
    if source == "synthetic":
        weights, acc = synthetic_pretrain(backbone, seed, **pretrain_kw)
        return weights, {"source": "synthetic", "seed": seed, "patch_accuracy": acc}
    path = Path(source)
    weights = read_backbone_file(path)
    # validates names and shapes against the preset
    build_segnet(SegModelConfig(backbone=backbone, decoder_channels=(8,) * 5, input_size=32), weights)
    return weights, {"source": "external", "path": str(path)}


# -- segmentation stages ------------------------------------------------------

def _samples_for(manifest: DatasetManifest, splits, target: int) -> list[ImageSample]:
    out: list[ImageSample] = []
    for split in splits:
        out.extend(load_samples(manifest, split, target))
    return out


def train_segmentation(model: SegNet, manifest: DatasetManifest, cfg: StageConfig, out_dir: str | os.PathLike,
                       name: str | None = None, train_samples: list[ImageSample] | None = None,
                       val_samples: list[ImageSample] | None = None,
                       policy: AugmentPolicy | None = None) -> tuple[Path, TrainLog]:
    """Dice-loss training with plateau LR decay; keeps the best checkpoint.

    With validation enabled the best epoch is the one with the highest validation
    mIoU, otherwise the final epoch. On return ``model`` holds the best weights.
    """
    out_dir = Path(out_dir)
    name = name or f"stage{cfg.stage}"
    size = model.config.input_size
    if train_samples is None:
        splits = ("train",) if cfg.validate else SPLITS
        train_samples = _samples_for(manifest, splits, size)
    if not train_samples:
        raise ValueError("no training samples")
    if cfg.validate and val_samples is None:
        val_samples = load_samples(manifest, "val", size)
    use_val = cfg.validate and bool(val_samples)

    if cfg.normalization == "dataset":
        model.set_normalizer(Normalizer.from_samples(train_samples))
    elif cfg.normalization == "imagenet":
        model.set_normalizer(Normalizer.imagenet())
    policy = (policy or AugmentPolicy()) if cfg.augment else None

    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
    trainlog = TrainLog(info={
        "stage": cfg.stage, "config": asdict(cfg), "reproducibility": reproducibility_mode(),
        "gradient_accumulation": cfg.accumulate, "train_samples": len(train_samples),
        "val_samples": len(val_samples or []), "selection": "val_mIoU" if use_val else "final_epoch",
    })
    best_path = out_dir / f"{name}_best.ckpt"
    best_score = -math.inf
    micro = cfg.batch_size // cfg.accumulate
    dtype = next(model.parameters()).dtype

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = sched.lr
        _set_lr(opt, lr)
        model.train()
        total, count = 0.0, 0
        for images, masks in iterate_batches(train_samples, cfg.batch_size, cfg.seed, epoch, policy):
            opt.zero_grad()
            x, y = torch.from_numpy(images).to(dtype), torch.from_numpy(masks)
            for xs, ys in zip(x.split(micro), y.split(micro)):
                loss = dice_loss(torch.softmax(model(xs), 1), ys)
                (loss * len(xs) / len(x)).backward()
                total += loss.item() * len(xs)
                count += len(xs)
            opt.step()
        train_loss = total / count
        if not math.isfinite(train_loss):
            diag = save_segnet(out_dir / f"{name}_diverged.ckpt", model, {"epoch": epoch, "stage": cfg.stage})
            raise TrainingDivergedError(f"{name}: training loss became {train_loss} at epoch {epoch}; state in {diag}")
        sched.step(train_loss)

        record: dict[str, Any] = {"epoch": epoch, "train_loss": train_loss, "lr": lr}
        if use_val:
            report = evaluate_segmentation(model, val_samples)
            record["val_mIoU"], record["val_mP"] = report.miou, report.mp
            score = report.miou
        else:
            score = float(epoch)
        meta = {"stage": cfg.stage, "epoch": epoch, "lr": cfg.lr, "batch_size": cfg.batch_size}
        if score > best_score:
            best_score = score
            save_segnet(best_path, model, meta)
            record["checkpoint"] = str(best_path)
        record["wall_time"] = time.perf_counter() - t0
        trainlog.append(**record)
        log.info("%s epoch %d loss %.4f lr %.1e %s", name, epoch, train_loss, lr,
                 f"val mIoU {record['val_mIoU']:.4f}" if use_val else "")

    best, _ = load_segnet(best_path)
    model.load_state_dict(best.state_dict())
    trainlog.write_jsonl(out_dir / f"{name}.jsonl")
    return best_path, trainlog


# -- meta stage ---------------------------------------------------------------

def train_meta(seg_model: SegNet | str | os.PathLike, manifest: DatasetManifest, cfg: StageConfig,
               wfmse: WfmseParams = WfmseParams(), out_dir: str | os.PathLike = ".",
               meta_config: MetaModelConfig | None = None, name: str = "meta",
               train_samples: list[ImageSample] | None = None,
               val_samples: list[ImageSample] | None = None) -> tuple[Path, TrainLog]:
    """Train the meta-model on soft-label targets from the frozen segmentation model.

    The best checkpoint has the highest validation AP-E. Raises FreezeViolationError if
    any segmentation parameter or buffer changed.
    """
    out_dir = Path(out_dir)
    seg = load_segnet(seg_model)[0] if isinstance(seg_model, (str, os.PathLike)) else seg_model
    seg.eval()
    for p in seg.parameters():
        p.requires_grad_(False)
    checksum = state_checksum(seg)

    size = seg.config.input_size
    if train_samples is None:
        train_samples = load_samples(manifest, "train", size)
    if val_samples is None and cfg.validate:
        val_samples = load_samples(manifest, "val", size)
    use_val = cfg.validate and bool(val_samples)
    meta_config = meta_config or MetaModelConfig(in_channels=seg.config.num_classes, input_size=size)
    meta = build_metanet(meta_config, cfg.seed)
    policy = AugmentPolicy() if cfg.augment else None

    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(meta.parameters(), lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
    metadata = {"lr": cfg.lr, "batch_size": cfg.batch_size, "e": [wfmse.e_correct, wfmse.e_incorrect],
                "beta": wfmse.beta, "gamma": wfmse.gamma, "seg_checksum": checksum}
    trainlog = TrainLog(info={"stage": "meta", "config": asdict(cfg), "wfmse": asdict(wfmse),
                              "reproducibility": reproducibility_mode(), "seg_checksum": checksum,
                              "selection": "val_AP-E" if use_val else "final_epoch"})
    best_path = out_dir / f"{name}_best.ckpt"
    best_score = -math.inf
    micro = cfg.batch_size // cfg.accumulate

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = sched.lr
        _set_lr(opt, lr)
        meta.train()
        total, count = 0.0, 0
        for images, masks in iterate_batches(train_samples, cfg.batch_size, cfg.seed, epoch, policy):
            opt.zero_grad()
            x, gt = torch.from_numpy(images), torch.from_numpy(masks)
            for xs, ys in zip(x.split(micro), gt.split(micro)):
                with torch.no_grad():
                    probs = torch.softmax(seg(xs.to(next(seg.parameters()).dtype)), 1)
                    pred = probs.argmax(1)
                    u = soft_label_targets(probs, pred, ys)
                    w = error_weights(pred, ys, wfmse)
                loss = wfmse_loss(u, meta(probs), w, wfmse)
                (loss * len(xs) / len(x)).backward()
                total += loss.item() * len(xs)
                count += len(xs)
            opt.step()
        train_loss = total / count
        if not math.isfinite(train_loss):
            diag = save_metanet(out_dir / f"{name}_diverged.ckpt", meta, {"epoch": epoch})
            raise TrainingDivergedError(f"{name}: training loss became {train_loss} at epoch {epoch}; state in {diag}")
        sched.step(train_loss)

        record: dict[str, Any] = {"epoch": epoch, "train_loss": train_loss, "lr": lr}
        if use_val:
            val = collect_soft_labels(seg, meta, val_samples)
            try:
                score = average_precision(val["u_hat"], val["correct"], "incorrect")
            except ValueError:
                score = float("nan")
            record["val_AP-E"] = score
            if math.isnan(score):
                score = -1.0
        else:
            score = float(epoch)
        if score > best_score:
            best_score = score
            save_metanet(best_path, meta, {**metadata, "epoch": epoch})
            record["checkpoint"] = str(best_path)
        record["wall_time"] = time.perf_counter() - t0
        trainlog.append(**record)
        log.info("%s epoch %d loss %.5f lr %.1e %s", name, epoch, train_loss, lr,
                 f"val AP-E {record['val_AP-E']:.4f}" if use_val else "")

    if state_checksum(seg) != checksum:
        raise FreezeViolationError("segmentation model changed during meta-model training")
    trainlog.info["seg_checksum_after"] = checksum
    trainlog.write_jsonl(out_dir / f"{name}.jsonl")
    return best_path, trainlog


# -- pipeline -----------------------------------------------------------------

DEFAULT_PIPELINE: dict[str, Any] = {
    "seed": 0,
    "model": {"backbone": "tiny", "input_size": 64},
    "meta_model": {"preset": "tiny"},
    "data": {
        "source": {"profile": "agr2like", "count": 100, "canvas": 64, "seed": 1, "splits": [1.0, 0.0, 0.0]},
        "target": {"profile": "agr567like", "count": 120, "canvas": 64, "seed": 2, "splits": [0.64, 0.16, 0.20]},
    },
    "stage1": {"init": "random"},
    "stage2": {"epochs": 50, "lr": 1e-3, "batch_size": 4, "augment": True},
    "stage3": {"epochs": 50, "lr": 1e-3, "batch_size": 4, "augment": True},
    "meta": {"epochs": 50, "lr": 1e-4, "batch_size": 16,
             "e_correct": 1.0, "e_incorrect": 8.0, "beta": 20.0, "gamma": 1.0},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def load_pipeline_config(config: str | os.PathLike | dict) -> dict:
    if isinstance(config, dict):
        return _merge(DEFAULT_PIPELINE, config)
    path = Path(config)
    if not path.exists():
        raise FileNotFoundError(f"pipeline config not found: {path}")
    cfg = json.loads(path.read_text(encoding="utf-8"))
    cfg = _merge(DEFAULT_PIPELINE, cfg)
    cfg["_base_dir"] = str(path.parent.resolve())
    return cfg


def _resolve_dataset(spec: dict, key: str, artifacts: Path, base_dir: Path) -> DatasetManifest:
    if "manifest" in spec:
        p = Path(spec["manifest"])
        return DatasetManifest.load(p if p.is_absolute() else base_dir / p)
    out = artifacts / "data" / key
    if (out / "manifest.json").exists():
        return DatasetManifest.load(out / "manifest.json")
    return generate_dataset(spec["profile"], int(spec["count"]), tuple(spec.get("splits", (0.64, 0.16, 0.2))),
                            int(spec.get("seed", 0)), out, int(spec.get("canvas", 512)))


def _stage_cfg(block: dict, stage: str, seed: int, **extra) -> StageConfig:
    keys = {f for f in StageConfig.__dataclass_fields__} - {"stage"}
    kw = {k: v for k, v in block.items() if k in keys}
    kw.setdefault("seed", seed)
    kw.update(extra)
    if stage == "meta":
        return StageConfig.meta(**kw)
    return StageConfig.segmentation(stage, **kw)


def _meta_config(cfg: dict, num_classes: int, size: int) -> MetaModelConfig:
    mm = dict(cfg.get("meta_model", {}))
    if mm.get("preset") == "tiny":
        return MetaModelConfig.tiny(size, num_classes)
    return MetaModelConfig(tuple(mm.get("encoder_channels", (64, 128, 256, 512, 1024))),
                           tuple(mm.get("decoder_channels", (256, 128, 64, 32))), num_classes, size)


def run_pipeline(config: str | os.PathLike | dict, artifacts: str | os.PathLike | None = None) -> Path:
    """Stage 1 init -> stage 2 -> stage 3 -> meta -> test-split reports.

    Completed stages are recorded in ``state.json``; rerunning resumes after the
    last completed stage.
    """
    cfg = load_pipeline_config(config)
    artifacts = Path(artifacts or cfg.get("artifacts") or os.environ.get(ARTIFACTS_ENV, "artifacts"))
    base_dir = Path(cfg.get("_base_dir", "."))
    ckpt_dir, log_dir, rep_dir = artifacts / "checkpoints", artifacts / "logs", artifacts / "reports"
    for d in (ckpt_dir, log_dir, rep_dir):
        d.mkdir(parents=True, exist_ok=True)
    state_path = artifacts / "state.json"
    state = json.loads(state_path.read_text()) if state_path.exists() else {"completed": {}}
    done = state["completed"]

    def mark(stage: str, **info):
        done[stage] = info
        state_path.write_text(json.dumps(state, indent=2, sort_keys=True))

    seed = int(cfg["seed"])
    mcfg = cfg["model"]
    seg_config = SegModelConfig(mcfg.get("backbone", "tiny"),
                                tuple(mcfg.get("decoder_channels",
                                               (64, 32, 16, 8, 8) if mcfg.get("backbone") == "tiny"
                                               else (256, 128, 64, 32, 16))),
                                int(mcfg.get("num_classes", NUM_CLASSES)), int(mcfg.get("input_size", 512)))
    size = seg_config.input_size
    skip2 = bool(cfg["stage2"].get("skip", False))
    target = _resolve_dataset(cfg["data"]["target"], "target", artifacts, base_dir)
    source = None if skip2 else _resolve_dataset(cfg["data"]["source"], "source", artifacts, base_dir)

    # stage 1
    backbone_path = ckpt_dir / "backbone.ckpt"
    if "stage1" not in done:
        init = cfg["stage1"].get("init", "random")
        if init not in ("random", "synthetic"):
            init = str(Path(init) if Path(init).is_absolute() else base_dir / init)
        weights, provenance = init_backbone(init, seg_config.backbone, seed,
                                            **cfg["stage1"].get("pretrain", {}))
        save_checkpoint(backbone_path, "backbone", {"backbone": seg_config.backbone}, weights, provenance)
        mark("stage1", checkpoint=str(backbone_path), **provenance)
    external = done["stage1"].get("source") == "external"
    norm_mode = "imagenet" if external else "dataset"

    # stage 2
    stage2_ckpt = None
    if not skip2:
        if "stage2" not in done:
            model = build_segnet(seg_config, str(backbone_path))
            scfg = _stage_cfg(cfg["stage2"], "2", seed + 2, validate=False, normalization=norm_mode)
            path, _ = train_segmentation(model, source, scfg, ckpt_dir, "stage2")
            os.replace(ckpt_dir / "stage2.jsonl", log_dir / "stage2.jsonl")
            mark("stage2", checkpoint=str(path))
        stage2_ckpt = Path(done["stage2"]["checkpoint"])

    # stage 3
    if "stage3" not in done:
        if stage2_ckpt is not None:
            model, _ = load_segnet(stage2_ckpt)
        else:
            model = build_segnet(seg_config, str(backbone_path))
        scfg = _stage_cfg(cfg["stage3"], "3", seed + 3, normalization=norm_mode)
        path, _ = train_segmentation(model, target, scfg, ckpt_dir, "stage3")
        os.replace(ckpt_dir / "stage3.jsonl", log_dir / "stage3.jsonl")
        mark("stage3", checkpoint=str(path))
    stage3_ckpt = Path(done["stage3"]["checkpoint"])

    # meta stage
    mb = cfg["meta"]
    wf = WfmseParams(mb.get("e_correct", 1.0), mb.get("e_incorrect", 8.0), mb.get("beta", 20.0), mb.get("gamma", 1.0))
    if "meta" not in done:
        seg, _ = load_segnet(stage3_ckpt)
        mcfg_meta = _meta_config(cfg, seg_config.num_classes, size)
        path, _ = train_meta(seg, target, _stage_cfg(mb, "meta", seed + 4), wf, ckpt_dir, mcfg_meta)
        os.replace(ckpt_dir / "meta.jsonl", log_dir / "meta.jsonl")
        mark("meta", checkpoint=str(path))
    meta_ckpt = Path(done["meta"]["checkpoint"])

    # evaluation on the target test split
    test = load_samples(target, "test", size)
    val = load_samples(target, "val", size)
    seg, _ = load_segnet(stage3_ckpt)
    final_label = "w/o FT-stage2" if skip2 else "w/ FT"
    reports = []
    if stage2_ckpt is not None:
        reports.append(evaluate_segmentation(load_segnet(stage2_ckpt)[0], test, label="w/o FT"))
    final = evaluate_segmentation(seg, test, label=final_label)
    reports.append(final)
    write_seg_report(final, rep_dir)
    if stage2_ckpt is not None:
        write_seg_report(reports[0], rep_dir, "seg_report_stage2")
    write_seg_table(reports, rep_dir / "seg_table.csv")
    meta, _ = load_metanet(meta_ckpt)
    uq = evaluate_uq(seg, meta, val, test, label=final_label)
    write_uq_report(uq, rep_dir)
    summary = {"segmentation": [r.to_dict() for r in reports], "uncertainty": uq.to_dict(),
               "reproducibility": reproducibility_mode()}
    (rep_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    mark("eval", reports=str(rep_dir))
    return artifacts
