"""Procedural source/target segmentation scenes with controllable domain shift.

Scenes are random rectangle and ellipse blobs over a dominant background
class, painted with per-class mean colors plus texture noise. The target
domain re-renders the same generative family through a photometric shift
(global color offset, per-class jitter, stronger noise). Five perturbation
families with five intensity levels each provide a corruption sweep whose
severity is strictly monotone in the level.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ClassSet, LabelMap, make_rng, save_image, save_label_map

PERTURBATION_FAMILIES = ("gaussian_noise", "motion_blur", "snow_speckle",
                         "fog_contrast", "brightness")

# per-level severity parameters (level 0 = identity everywhere)
GAUSS_SIGMA = 0.05          # * level
BLUR_HALF_WIDTH = 2         # * level, horizontal kernel width 2*h+1
SNOW_DENSITY = 0.05         # * level, fraction of speckled blocks
SNOW_BLOCK = 2              # speckle block side in pixels
FOG_ALPHA = 0.11            # * level, blend toward FOG_COLOR
FOG_COLOR = 0.7
FOG_NOISE = 0.02            # * level, scattering noise on top of the contrast loss
BRIGHTNESS_STEP = 0.06      # * level


def default_palette(num_classes: int) -> np.ndarray:
    """Hue-separated colors with staggered lightness; class 0 is a dark gray
    background. The lightness ramp makes photometric corruptions saturate the
    classes one after another instead of all at once."""
    colors = np.zeros((num_classes, 3))
    colors[0] = (0.25, 0.25, 0.25)
    for c in range(1, num_classes):
        t = (c - 1) / max(num_classes - 2, 1)
        v = 0.5 + 0.3 * t
        hue = 6.0 * (c - 1) / max(num_classes - 1, 1)
        i = int(hue) % 6
        f = hue - int(hue)
        p = 0.25 * v
        q = v - (v - p) * f
        r = p + (v - p) * f
        colors[c] = [(v, r, p), (q, v, p), (p, v, r), (p, q, v), (r, p, v), (v, p, q)][i]
    return colors


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    blob_min: int = 3
    blob_max: int = 7
    noise_sigma: float = 0.05
    grid_snap: int = 4           # rectangles snap to this grid (0 disables)
    class_colors: np.ndarray | None = None
    shift_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    shift_jitter: float = 0.0
    shift_noise_mult: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"scene dims must be positive, got {self.height}x{self.width}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.noise_sigma < 0 or self.shift_jitter < 0:
            raise ValueError("noise sigma and jitter must be non-negative")
        colors = self.class_colors if self.class_colors is not None \
            else default_palette(self.num_classes)
        colors = np.ascontiguousarray(colors, dtype=np.float64)
        if colors.shape != (self.num_classes, 3):
            raise ValueError(f"class_colors must be ({self.num_classes}, 3), got {colors.shape}")
        colors.setflags(write=False)
        object.__setattr__(self, "class_colors", colors)
        off = np.ascontiguousarray(np.broadcast_to(np.asarray(self.shift_offset, dtype=np.float64), (3,)))
        off.setflags(write=False)
        object.__setattr__(self, "shift_offset", off)


@dataclass(frozen=True)
class Perturbation:
    family: str
    level: int

    def __post_init__(self):
        if self.family not in PERTURBATION_FAMILIES:
            raise ValueError(f"unknown perturbation family {self.family!r}; "
                             f"choose from {PERTURBATION_FAMILIES}")
        if not (0 <= self.level <= 5):
            raise ValueError(f"intensity level must lie in 0..5, got {self.level}")


def generate_scene(cfg: SceneConfig, rng: np.random.Generator):
    """One scene: blob labels over background plus color-and-noise rendering."""
    h, w = cfg.height, cfg.width
    labels = np.zeros((h, w), dtype=np.int64)
    n_blobs = int(rng.integers(cfg.blob_min, cfg.blob_max + 1)) if cfg.blob_max > 0 else 0
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        c = int(rng.integers(1, cfg.num_classes))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h / 7, h / 2.8), rng.uniform(w / 7, w / 2.8)
        if rng.random() < 0.5:
            y0, y1, x0, x1 = cy - ry, cy + ry, cx - rx, cx + rx
            if cfg.grid_snap:
                snap = cfg.grid_snap
                y0, y1, x0, x1 = (round(v / snap) * snap for v in (y0, y1, x0, x1))
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        labels[mask] = c
    image = cfg.class_colors[labels] + rng.normal(size=(h, w, 3)) * cfg.noise_sigma
    return np.clip(image, 0.0, 1.0), LabelMap(labels)


def shift_domain(image: np.ndarray, labels: LabelMap, cfg: SceneConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Photometric target-domain rendering of a scene; labels stay valid.

    Applies the global color offset, a per-class color jitter drawn from the
    rng, and extra texture noise so the target noise level is
    ``shift_noise_mult`` times the source one.
    """
    out = image + cfg.shift_offset[None, None, :]
    jitter = rng.normal(size=(cfg.num_classes, 3)) * cfg.shift_jitter
    out = out + jitter[labels.data]
    extra = cfg.noise_sigma * np.sqrt(max(cfg.shift_noise_mult ** 2 - 1.0, 0.0))
    if extra > 0:
        out = out + rng.normal(size=image.shape) * extra
    return np.clip(out, 0.0, 1.0)


def perturb(image: np.ndarray, p: Perturbation, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption family at the given intensity level."""
    if p.level == 0:
        return image.copy()
    if p.family == "gaussian_noise":
        noisy = image + rng.normal(size=image.shape) * (GAUSS_SIGMA * p.level)
        return np.clip(noisy, 0.0, 1.0)
    if p.family == "motion_blur":
        half = BLUR_HALF_WIDTH * p.level
        width = 2 * half + 1
        padded = np.pad(image, ((0, 0), (half, half), (0, 0)), mode="edge")
        out = np.zeros_like(image)
        for dx in range(width):
            out += padded[:, dx:dx + image.shape[1], :]
        return out / width
    if p.family == "snow_speckle":
        h, w = image.shape[:2]
        bh, bw = -(-h // SNOW_BLOCK), -(-w // SNOW_BLOCK)
        u = rng.random(size=(bh, bw))
        hit = np.repeat(np.repeat(u < SNOW_DENSITY * p.level, SNOW_BLOCK, axis=0),
                        SNOW_BLOCK, axis=1)[:h, :w]
        out = image.copy()
        out[hit] = 1.0
        return out
    if p.family == "fog_contrast":
        alpha = FOG_ALPHA * p.level
        hazy = (1.0 - alpha) * image + alpha * FOG_COLOR
        hazy = hazy + rng.normal(size=image.shape) * (FOG_NOISE * p.level)
        return np.clip(hazy, 0.0, 1.0)
    if p.family == "brightness":
        return np.clip(image + BRIGHTNESS_STEP * p.level, 0.0, 1.0)
    raise ValueError(f"unknown perturbation family {p.family!r}")


# ---------------------------------------------------------------------------
# dataset persistence

SPLITS = ("source_train", "source_val", "target_train", "target_val")


def build_dataset(cfg: SceneConfig, counts: dict, outdir,
                  perturbation: Perturbation | None = None) -> dict:
    """Generate and persist a paired dataset; returns manifest path per split.

    ``counts`` maps split name to scene count. Target splits render through
    ``shift_domain``; when a perturbation is given it is applied to target
    images on top of the domain shift (the sweep scenario).
    """
    os.makedirs(outdir, exist_ok=True)
    manifests = {}
    for si, split in enumerate(SPLITS):
        n = counts[split]
        lines = []
        for i in range(n):
            rng = make_rng(cfg.seed, stream=(si + 1) * 100_000 + i)
            image, labels = generate_scene(cfg, rng)
            if split.startswith("target"):
                image = shift_domain(image, labels, cfg, rng)
                if perturbation is not None and perturbation.level > 0:
                    image = perturb(image, perturbation, rng)
            img_name, lab_name = f"{split}_{i:04d}.img", f"{split}_{i:04d}.lab"
            save_image(os.path.join(outdir, img_name), image)
            save_label_map(os.path.join(outdir, lab_name), labels)
            lines.append(f"{img_name}\t{lab_name}")
        manifest = os.path.join(outdir, f"{split}.txt")
        with open(manifest, "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        manifests[split] = manifest
    return manifests


def load_manifest(manifest_path):
    """Read (image, labels) pairs listed by a manifest, resolving relative paths."""
    from .core import load_image, load_label_map
    base = os.path.dirname(os.path.abspath(manifest_path))
    images, labels = [], []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            img_name, lab_name = line.split("\t")
            images.append(load_image(os.path.join(base, img_name)))
            labels.append(load_label_map(os.path.join(base, lab_name)))
    return images, labels
