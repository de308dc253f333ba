"""Line-based ``key = value`` run configuration.

One flat namespace covers every tunable of the pipeline. Parsing is total:
unknown keys, bad values and malformed lines are all reported with their
line number. ``defaults()`` documents every key; ``describe()`` renders the
reference table shown by the CLI.
"""

from __future__ import annotations

import numpy as np

from .losses import LossWeights
from .pseudolabel import PseudoLabelConfig
from .synth import SceneConfig, default_palette
from .trainer import NetConfig, OptimConfig, TrainSettings

# key -> (default, parser, help)
_SCHEMA = {
    "scene.height":        (64, int, "scene height in pixels"),
    "scene.width":         (64, int, "scene width in pixels"),
    "scene.num_classes":   (5, int, "number of semantic classes incl. background"),
    "scene.blob_min":      (3, int, "min random blobs per scene"),
    "scene.blob_max":      (7, int, "max random blobs per scene"),
    "scene.noise_sigma":   (0.04, float, "texture noise std dev"),
    "scene.grid_snap":     (4, int, "rectangle blobs snap to this pixel grid (0 = off)"),
    "scene.class_colors":  ("auto", "floats_or_auto", "3*C floats in [0,1], or 'auto' palette"),
    "shift.offset":        ((0.15, 0.15, 0.15), "floats3", "global target color offset (1 or 3 floats)"),
    "shift.jitter":        (0.05, float, "per-class target color jitter std dev"),
    "shift.noise_mult":    (2.5, float, "target texture noise multiplier"),
    "data.train_scenes":   (24, int, "scenes per training split"),
    "data.val_scenes":     (8, int, "scenes per validation split"),
    "decim.peak_ratio":    (0.5, float, "histogram peak dominance threshold in (0,1)"),
    "pseudo.tau":          (0.5, float, "two-pass confidence threshold"),
    "proto.eta":           (0.8, float, "prototype smoothing factor in [0,1]"),
    "proto.log_trajectory": (False, "bool", "record prototype trajectories to CSV"),
    "loss.lambda_c":       (0.1, float, "clustering loss weight"),
    "loss.lambda_p":       (0.15, float, "perpendicularity loss weight"),
    "loss.lambda_n":       (0.025, float, "norm alignment loss weight"),
    "loss.lambda_em":      (0.1, float, "entropy minimization weight"),
    "loss.delta_f":        (0.1, float, "norm growth regularization strength"),
    "net.window_h":        (4, int, "encoder window height (latent stride)"),
    "net.window_w":        (4, int, "encoder window width"),
    "net.hidden":          (32, int, "encoder hidden width"),
    "net.channels":        (16, int, "latent channels K"),
    "optim.base_lr":       (0.05, float, "initial learning rate (desk-scale default)"),
    "optim.momentum":      (0.9, float, "SGD momentum"),
    "optim.weight_decay":  (5e-4, float, "L2 weight decay"),
    "optim.poly_power":    (0.9, float, "polynomial lr decay power"),
    "optim.total_steps":   (2000, int, "training steps"),
    "train.warm_steps":    (500, int, "source-only warm start before adaptation"),
    "train.eval_every":    (200, int, "evaluation period in steps"),
    "train.patience":      (0, int, "early-stopping patience in evals (0 = off)"),
    "train.reference_iou_csv": ("", str, "supervised-reference report for mASR columns"),
    "sweep.levels":        ("1 2 3 4 5", str, "intensity levels for the perturbation sweep"),
    "sweep.families":      ("all", str, "perturbation families, space-separated or 'all'"),
    "seed":                (0, int, "master seed"),
}


class ConfigError(ValueError):
    pass


def _parse_bool(tok: str) -> bool:
    low = tok.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {tok!r}")


def _parse_value(key: str, raw: str):
    _, parser, _ = _SCHEMA[key]
    raw = raw.strip()
    if parser == "bool":
        return _parse_bool(raw)
    if parser == "floats3":
        vals = [float(t) for t in raw.split()]
        if len(vals) == 1:
            vals = vals * 3
        if len(vals) != 3:
            raise ValueError(f"expected 1 or 3 floats, got {len(vals)}")
        return tuple(vals)
    if parser == "floats_or_auto":
        if raw == "auto":
            return "auto"
        return tuple(float(t) for t in raw.split())
    return parser(raw)


def defaults() -> dict:
    return {k: v for k, (v, _, _) in _SCHEMA.items()}


def describe() -> str:
    lines = ["# configuration reference (key = default  # help)"]
    for key, (default, _, help_text) in _SCHEMA.items():
        lines.append(f"{key} = {format_value(default)}  # {help_text}")
    return "\n".join(lines)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(f"{x:g}" for x in v)
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def parse_config(path) -> dict:
    """Parse a config file on top of the defaults; every problem names its line."""
    cfg = defaults()
    errors = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                errors.append(f"line {ln}: expected 'key = value', got {stripped!r}")
                continue
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _SCHEMA:
                errors.append(f"line {ln}: unknown key {key!r}")
                continue
            try:
                cfg[key] = _parse_value(key, raw)
            except ValueError as exc:
                errors.append(f"line {ln}: bad value for {key}: {exc}")
    if errors:
        raise ConfigError("\n".join(errors))
    return cfg


def write_config(path, cfg: dict) -> None:
    """Archive a fully resolved configuration in re-parseable form."""
    with open(path, "w") as fh:
        for key in _SCHEMA:
            fh.write(f"{key} = {format_value(cfg[key])}\n")


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``key=value`` overrides (from ``--set``) with the same validation."""
    out = dict(cfg)
    for i, pair in enumerate(pairs or (), start=1):
        if "=" not in pair:
            raise ConfigError(f"override {i}: expected key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"override {i}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"override {i}: bad value for {key}: {exc}")
    return out


# ---------------------------------------------------------------------------
# typed views over the flat namespace


def scene_config(cfg: dict, seed: int | None = None) -> SceneConfig:
    c = cfg["scene.num_classes"]
    colors = cfg["scene.class_colors"]
    if colors == "auto":
        palette = default_palette(c)
    else:
        arr = np.asarray(colors, dtype=np.float64)
        if arr.size != 3 * c:
            raise ConfigError(f"scene.class_colors needs {3 * c} floats, got {arr.size}")
        palette = arr.reshape(c, 3)
    return SceneConfig(
        height=cfg["scene.height"], width=cfg["scene.width"], num_classes=c,
        blob_min=cfg["scene.blob_min"], blob_max=cfg["scene.blob_max"],
        noise_sigma=cfg["scene.noise_sigma"], grid_snap=cfg["scene.grid_snap"],
        class_colors=palette,
        shift_offset=np.asarray(cfg["shift.offset"]), shift_jitter=cfg["shift.jitter"],
        shift_noise_mult=cfg["shift.noise_mult"],
        seed=cfg["seed"] if seed is None else seed,
    )


def train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(
        net=NetConfig(cfg["net.window_h"], cfg["net.window_w"], cfg["net.hidden"],
                      cfg["net.channels"], cfg["scene.num_classes"]),
        optim=OptimConfig(cfg["optim.base_lr"], cfg["optim.momentum"],
                          cfg["optim.weight_decay"], cfg["optim.poly_power"],
                          cfg["optim.total_steps"]),
        loss=LossWeights(cfg["loss.lambda_c"], cfg["loss.lambda_p"], cfg["loss.lambda_n"],
                         cfg["loss.lambda_em"], cfg["loss.delta_f"]),
        pseudo=PseudoLabelConfig(cfg["pseudo.tau"]),
        eta=cfg["proto.eta"], peak_ratio=cfg["decim.peak_ratio"],
        warm_steps=cfg["train.warm_steps"], eval_every=cfg["train.eval_every"],
        patience=cfg["train.patience"], log_trajectory=cfg["proto.log_trajectory"],
        reference_iou_csv=cfg["train.reference_iou_csv"],
    )
