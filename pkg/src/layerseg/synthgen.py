"""Synthetic layered-particle micrographs with pixel-exact label masks.

Each particle is a set of concentric annuli (kernel, buffer, IPyC, SiC, OPyC)
rendered with per-layer texture, illumination non-uniformity and noise. Defects
are injected into a material map first, so the label mask and the image are
always derived from the same geometry.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import cv2
import numpy as np

from .core_types import BACKGROUND, BUFFER, IPYC, KERNEL, OPYC, SIC, ImageSample

GENERATOR_VERSION = "1.0"
MIN_CANVAS = 64
SPLITS = ("train", "val", "test")
DEFECT_KINDS = ("gap-bridge", "crack", "kernel-pullout", "missing-OPyC", "polish-noise")

# fraction of the canvas half-width at which each layer ends
RADIUS_FRACTIONS = (0.42, 0.62, 0.72, 0.82, 0.92)

# material ids: 0-5 are the label classes, VOID marks gaps, cracks and pull-outs
VOID = 6
NUM_MATERIALS = 7


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DomainProfile:
    name: str
    missing_opyc_prob: float
    gap_prob: float = 0.5
    gap_width_range: tuple[float, float] = (0.01, 0.04)  # fraction of particle radius
    defect_rates: dict[str, float] = field(default_factory=dict)
    noise_range: tuple[float, float] = (0.01, 0.03)
    illumination_range: tuple[float, float] = (0.0, 0.1)
    tiled_illumination_prob: float = 0.0
    texture_amplitude: float = 0.04
    # base gray per material id (background, kernel, buffer, IPyC, SiC, OPyC, void)
    gray_levels: tuple[float, ...] = (0.40, 0.16, 0.32, 0.56, 0.84, 0.60, 0.06)
    gray_jitter: float = 0.03

    def __post_init__(self):
        probs = [self.missing_opyc_prob, self.gap_prob, self.tiled_illumination_prob,
                 *self.defect_rates.values()]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigurationError(f"profile {self.name!r}: probabilities must be in [0, 1]")
        unknown = set(self.defect_rates) - set(DEFECT_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown defect kinds {sorted(unknown)}")
        if len(self.gray_levels) != NUM_MATERIALS:
            raise ConfigurationError("gray_levels needs one entry per material")

    def rate(self, kind: str) -> float:
        if kind == "missing-OPyC":
            return self.missing_opyc_prob
        return self.defect_rates.get(kind, 0.0)


PROFILES: dict[str, DomainProfile] = {
    # freed particles in epoxy, OPyC usually removed (1764 of 2171 ~ 0.81)
    "agr2like": DomainProfile(
        name="agr2like",
        missing_opyc_prob=0.81,
        defect_rates={"gap-bridge": 0.3, "crack": 0.1, "kernel-pullout": 0.05, "polish-noise": 0.1},
        noise_range=(0.01, 0.03),
        illumination_range=(0.0, 0.08),
        texture_amplitude=0.035,
        gray_levels=(0.24, 0.14, 0.36, 0.52, 0.80, 0.62, 0.05),
    ),
    # particles in graphite matrix, all layers, heavier artifacts
    "agr567like": DomainProfile(
        name="agr567like",
        missing_opyc_prob=0.0,
        defect_rates={"gap-bridge": 0.5, "crack": 0.2, "kernel-pullout": 0.15, "polish-noise": 0.4},
        noise_range=(0.02, 0.05),
        illumination_range=(0.05, 0.2),
        tiled_illumination_prob=0.5,
        texture_amplitude=0.05,
    ),
    "easy": DomainProfile(
        name="easy",
        missing_opyc_prob=0.0,
        gap_prob=0.0,
        defect_rates={},
        noise_range=(0.005, 0.01),
        illumination_range=(0.0, 0.0),
        texture_amplitude=0.02,
    ),
}


def get_profile(name: str) -> DomainProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class Defect:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ParticleSpec:
    center: tuple[float, float]  # (x, y) pixels
    radii: tuple[float, float, float, float, float]  # outer radius of kernel .. OPyC
    gap_width: float
    defects: tuple[Defect, ...]
    texture_seeds: tuple[int, ...]
    gray_levels: tuple[float, ...]
    texture_amplitude: float
    noise_sigma: float
    illumination: dict[str, Any]

    def __post_init__(self):
        if len(self.radii) != 5 or any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ConfigurationError(f"radii must be 5 strictly increasing values, got {self.radii}")
        if self.radii[0] <= 0:
            raise ConfigurationError("kernel radius must be positive")
        if not 0 <= self.gap_width < self.radii[1] - self.radii[0]:
            raise ConfigurationError("gap width must be non-negative and below buffer thickness")
        for d in self.defects:
            if d.kind not in DEFECT_KINDS:
                raise ConfigurationError(f"unknown defect kind {d.kind!r}")

    def has(self, kind: str) -> bool:
        return any(d.kind == kind for d in self.defects)

    def fits(self, canvas: int) -> bool:
        cx, cy = self.center
        r = self.radii[-1]
        return cx - r >= 0 and cy - r >= 0 and cx + r <= canvas and cy + r <= canvas

    def to_dict(self) -> dict:
        return asdict(self)


def sample_particle_spec(rng: np.random.Generator, profile: DomainProfile, canvas: int = 512) -> ParticleSpec:
    """Draw one particle description; all randomness comes from ``rng``."""
    if canvas < MIN_CANVAS:
        raise ConfigurationError(f"canvas {canvas} is below the minimum of {MIN_CANVAS}")
    half = canvas / 2.0

    thickness = np.diff(np.concatenate([[0.0], RADIUS_FRACTIONS])) * half
    thickness = thickness * rng.uniform(0.9, 1.1, size=5)
    radii = np.cumsum(thickness)
    if radii[-1] > 0.95 * half:
        radii *= 0.95 * half / radii[-1]

    slack = max(half - radii[-1] - 1.0, 0.0)
    offset_r = rng.uniform(0.0, min(slack, 0.05 * half))
    offset_a = rng.uniform(0.0, 2 * np.pi)
    center = (half + offset_r * np.cos(offset_a), half + offset_r * np.sin(offset_a))

    gap_width = 0.0
    if rng.random() < profile.gap_prob:
        gap_width = rng.uniform(*profile.gap_width_range) * radii[-1]
        gap_width = min(gap_width, 0.5 * thickness[1])

    defects: list[Defect] = []
    if rng.random() < profile.rate("missing-OPyC"):
        defects.append(Defect("missing-OPyC"))
    if rng.random() < profile.rate("gap-bridge") and gap_width > 0:
        n = int(rng.integers(1, 4))
        defects.append(Defect("gap-bridge", {
            "angles": [float(a) for a in rng.uniform(0, 2 * np.pi, size=n)],
            "width": float(max(1.0, rng.uniform(0.01, 0.03) * canvas)),
        }))
    if rng.random() < profile.rate("crack"):
        layer = int(rng.integers(BUFFER, OPYC + 1))
        inner = radii[layer - 2]
        outer = radii[layer - 1]
        defects.append(Defect("crack", {
            "angle": float(rng.uniform(0, 2 * np.pi)),
            "width": float(max(1.0, rng.uniform(0.004, 0.01) * canvas)),
            "r_inner": float(inner),
            "r_outer": float(outer),
        }))
    if rng.random() < profile.rate("kernel-pullout"):
        defects.append(Defect("kernel-pullout", {
            "angle": float(rng.uniform(0, 2 * np.pi)),
            "offset": float(rng.uniform(0.3, 0.7) * radii[0]),
            "radius": float(rng.uniform(0.2, 0.45) * radii[0]),
        }))
    if rng.random() < profile.rate("polish-noise"):
        defects.append(Defect("polish-noise", {
            "scratches": int(rng.integers(2, 8)),
            "pits": int(rng.integers(0, 20)),
            "seed": int(rng.integers(0, 2**31 - 1)),
        }))

    gray = np.clip(np.asarray(profile.gray_levels) + rng.uniform(-1, 1, NUM_MATERIALS) * profile.gray_jitter, 0, 1)
    tiled = rng.random() < profile.tiled_illumination_prob
    illumination = {
        "angle": float(rng.uniform(0, 2 * np.pi)),
        "amplitude": float(rng.uniform(*profile.illumination_range)),
        "tiles": 4 if tiled else 0,
        "tile_seed": int(rng.integers(0, 2**31 - 1)),
        "tile_amplitude": 0.08 if tiled else 0.0,
    }
    return ParticleSpec(
        center=(float(center[0]), float(center[1])),
        radii=tuple(float(r) for r in radii),
        gap_width=float(gap_width),
        defects=tuple(defects),
        texture_seeds=tuple(int(s) for s in rng.integers(0, 2**31 - 1, size=NUM_MATERIALS)),
        gray_levels=tuple(float(g) for g in gray),
        texture_amplitude=float(profile.texture_amplitude),
        noise_sigma=float(rng.uniform(*profile.noise_range)),
        illumination=illumination,
    )


def _polar_grid(spec: ParticleSpec, canvas: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    dx, dy = xx - spec.center[0], yy - spec.center[1]
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def _angle_diff(theta: np.ndarray, angle: float) -> np.ndarray:
    return np.abs((theta - angle + np.pi) % (2 * np.pi) - np.pi)


def material_map(spec: ParticleSpec, canvas: int) -> np.ndarray:
    """Per-pixel material id (label classes plus VOID) with defects applied."""
    r, theta = _polar_grid(spec, canvas)
    rk, rb, ri, rs, ro = spec.radii
    mat = np.full((canvas, canvas), BACKGROUND, dtype=np.uint8)
    mat[r < ro] = BACKGROUND if spec.has("missing-OPyC") else OPYC
    mat[r < rs] = SIC
    mat[r < ri] = IPYC
    mat[r < rb] = VOID if spec.gap_width > 0 else BUFFER
    mat[r < rb - spec.gap_width] = BUFFER
    mat[r < rk] = KERNEL

    for d in spec.defects:
        p = d.params
        if d.kind == "gap-bridge":
            in_gap = (r >= rb - spec.gap_width) & (r < rb)
            for a in p["angles"]:
                arc = _angle_diff(theta, a) * np.maximum(r, 1e-9)
                mat[in_gap & (arc <= p["width"] / 2)] = BUFFER
        elif d.kind == "crack":
            # perpendicular distance to the radial ray at the crack angle
            ang = _angle_diff(theta, p["angle"])
            dist = r * np.sin(np.minimum(ang, np.pi / 2))
            hit = (ang < np.pi / 2) & (dist <= p["width"] / 2) & (r >= p["r_inner"]) & (r < p["r_outer"])
            mat[hit & (mat != VOID)] = VOID
        elif d.kind == "kernel-pullout":
            px = spec.center[0] + p["offset"] * np.cos(p["angle"])
            py = spec.center[1] + p["offset"] * np.sin(p["angle"])
            yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
            hole = np.hypot(xx - px, yy - py) < p["radius"]
            mat[hole & (mat == KERNEL)] = VOID
    return mat


def label_mask(materials: np.ndarray) -> np.ndarray:
    mask = materials.astype(np.int64)
    mask[materials == VOID] = BACKGROUND
    return mask


def _band_noise(seed: int, canvas: int, sigma: float) -> np.ndarray:
    noise = np.random.default_rng(seed).standard_normal((canvas, canvas)).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigma)
    return noise / (noise.std() + 1e-8)


def render_particle(spec: ParticleSpec, canvas: int, rng: np.random.Generator) -> ImageSample:
    """Render the image and exact label mask for ``spec``.

    The output image is grayscale replicated to three channels, values in [0, 1].
    """
    if not spec.fits(canvas):
        raise ConfigurationError("particle does not fit on the canvas")
    mat = material_map(spec, canvas)
    mask = label_mask(mat)

    scale = canvas / 64.0
    gray = np.asarray(spec.gray_levels, dtype=np.float32)
    img = gray[mat]
    for m in range(NUM_MATERIALS):
        sel = mat == m
        if sel.any():
            tex = _band_noise(spec.texture_seeds[m], canvas, 1.2 * scale)
            img[sel] += spec.texture_amplitude * tex[sel]
    img = cv2.GaussianBlur(img, (0, 0), 0.5 * scale)

    ill = spec.illumination
    yy, xx = (np.mgrid[0:canvas, 0:canvas].astype(np.float32) + 0.5) / canvas - 0.5
    ramp = xx * np.cos(ill["angle"]) + yy * np.sin(ill["angle"])
    img *= 1.0 + ill["amplitude"] * 2.0 * ramp
    if ill["tiles"]:
        n = ill["tiles"]
        offsets = np.random.default_rng(ill["tile_seed"]).uniform(-1, 1, (n, n)) * ill["tile_amplitude"]
        tile = np.repeat(np.repeat(offsets, int(np.ceil(canvas / n)), 0), int(np.ceil(canvas / n)), 1)
        img += tile[:canvas, :canvas].astype(np.float32)

    for d in spec.defects:
        if d.kind == "polish-noise":
            prng = np.random.default_rng(d.params["seed"])
            layer = np.zeros_like(img)
            for _ in range(d.params["scratches"]):
                p0 = prng.uniform(0, canvas, 2)
                p1 = p0 + prng.uniform(-0.5, 0.5, 2) * canvas
                val = float(prng.uniform(-0.15, 0.15))
                cv2.line(layer, tuple(int(v) for v in p0), tuple(int(v) for v in p1), val,
                         thickness=max(1, int(round(0.5 * scale))))
            for _ in range(d.params["pits"]):
                c = prng.uniform(0, canvas, 2)
                cv2.circle(layer, (int(c[0]), int(c[1])), max(1, int(round(0.4 * scale))), -0.2, -1)
            img += layer

    img += rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8 bits so an in-memory sample equals its PNG round trip
    img = np.round(img * 255.0) / 255.0
    image = np.repeat(img[..., None], 3, axis=2).astype(np.float32)
    return ImageSample(image=image, mask=mask, meta={"canvas": canvas})


def sample_seed(global_seed: int, index: int) -> int:
    """Per-sample seed, a pure function of (global seed, index)."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1)[0])


def generate_sample(profile: DomainProfile, seed: int, canvas: int) -> tuple[ParticleSpec, ImageSample]:
    rng = np.random.default_rng(seed)
    spec = sample_particle_spec(rng, profile, canvas)
    return spec, render_particle(spec, canvas, rng)


def split_sizes(count: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Round validation and test sizes; the remainder goes to training."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ConfigurationError("split fractions must be non-negative")
    # rounding both up can overshoot tiny counts; test then takes what is left
    n_val = min(int(round(fractions[1] * count)), count)
    n_test = min(int(round(fractions[2] * count)), count - n_val)
    return count - n_val - n_test, n_val, n_test


@dataclass
class DatasetManifest:
    samples: list[dict[str, Any]]
    generator_version: str = GENERATOR_VERSION
    global_seed: int = 0
    profile: str = ""
    canvas: int = 0
    root: Path | None = None  # directory that sample paths are relative to

    def __post_init__(self):
        paths = [s["image"] for s in self.samples] + [s["mask"] for s in self.samples]
        if len(set(paths)) != len(paths):
            raise ConfigurationError("manifest paths must be unique")
        for s in self.samples:
            if s["split"] not in SPLITS:
                raise ConfigurationError(f"unknown split {s['split']!r}")

    def split(self, name: str) -> list[dict[str, Any]]:
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split {name!r}")
        return [s for s in self.samples if s["split"] == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_json(self) -> str:
        doc = {
            "generator_version": self.generator_version,
            "global_seed": self.global_seed,
            "profile": self.profile,
            "canvas": self.canvas,
            "samples": self.samples,
        }
        return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            samples=doc["samples"],
            generator_version=doc.get("generator_version", GENERATOR_VERSION),
            global_seed=doc.get("global_seed", 0),
            profile=doc.get("profile", ""),
            canvas=doc.get("canvas", 0),
            root=path.parent,
        )


def write_png(path: Path, array: np.ndarray) -> None:
    if not cv2.imwrite(str(path), array):
        raise OSError(f"could not write {path}")


def generate_dataset(profile: DomainProfile | str, count: int, splits=(0.64, 0.16, 0.20),
                     seed: int = 0, out_dir: str | os.PathLike = "data", canvas: int = 512) -> DatasetManifest:
    """Write ``count`` samples as PNG pairs plus ``manifest.json`` into ``out_dir``."""
    if isinstance(profile, str):
        profile = get_profile(profile)
    if count < 0:
        raise ConfigurationError("count must be non-negative")
    sizes = split_sizes(count, tuple(splits))
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write to {out}: {e}") from e

    order = np.random.default_rng(seed).permutation(count)
    split_of = np.empty(count, dtype=object)
    split_of[order[:sizes[0]]] = "train"
    split_of[order[sizes[0]:sizes[0] + sizes[1]]] = "val"
    split_of[order[sizes[0] + sizes[1]:]] = "test"

    samples = []
    for i in range(count):
        s = sample_seed(seed, i)
        _, sample = generate_sample(profile, s, canvas)
        img_rel, mask_rel = f"images/{i:05d}.png", f"masks/{i:05d}.png"
        write_png(out / img_rel, np.round(sample.image[..., 0] * 255).astype(np.uint8))
        write_png(out / mask_rel, sample.mask.astype(np.uint8))
        samples.append({"index": i, "image": img_rel, "mask": mask_rel, "seed": s,
                        "profile": profile.name, "split": str(split_of[i])})
    manifest = DatasetManifest(samples=samples, global_seed=seed, profile=profile.name,
                               canvas=canvas, root=out)
    manifest.save(out / "manifest.json")
    return manifest
