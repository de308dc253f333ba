"""Downsampling of full-resolution label maps to latent resolution.

Each non-overlapping window is reduced to a single label through a weighted
frequency histogram: a window is assigned the peak class only when every
other bin stays strictly below ``peak_ratio`` times the peak, otherwise it
becomes void. Weights are inverse class frequencies computed once over the
source training corpus, so rare classes survive the reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassSet, LabelMap


@dataclass(frozen=True)
class DecimationConfig:
    window_h: int
    window_w: int
    class_weights: np.ndarray
    peak_ratio: float = 0.5

    def __post_init__(self):
        if self.window_h <= 0 or self.window_w <= 0:
            raise ValueError(f"window dims must be positive, got {self.window_h}x{self.window_w}")
        if not (0.0 < self.peak_ratio < 1.0):
            raise ValueError(f"peak_ratio must lie in (0,1), got {self.peak_ratio}")
        w = np.ascontiguousarray(self.class_weights, dtype=np.float64)
        if w.ndim != 1 or (w <= 0).any():
            raise ValueError("class_weights must be a 1-D array of positive reals")
        w.setflags(write=False)
        object.__setattr__(self, "class_weights", w)


def class_frequency_weights(labels, classes: ClassSet) -> np.ndarray:
    """Inverse-frequency weights over a label corpus, max-normalized to 1.

    Classes absent from the corpus receive the largest observed weight so
    they are never silently discounted once they do appear.
    """
    counts = np.zeros(classes.num_classes, dtype=np.int64)
    for lm in labels:
        valid = lm.data[lm.data != lm.void_id]
        counts += np.bincount(valid, minlength=classes.num_classes)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty corpus: no non-void pixels to estimate class frequencies")
    present = counts > 0
    weights = np.zeros(classes.num_classes, dtype=np.float64)
    weights[present] = total / counts[present]
    weights[~present] = weights[present].max()
    return weights / weights.max()


def decimate(labels: LabelMap, cfg: DecimationConfig, classes: ClassSet) -> LabelMap:
    """Reduce ``labels`` to latent resolution via the weighted histogram rule.

    Void input pixels are excluded from the histograms; a window whose
    second-largest weighted bin reaches ``peak_ratio`` times the largest
    (or which is entirely void) maps to void.
    """
    wh, ww = cfg.window_h, cfg.window_w
    if labels.height % wh or labels.width % ww:
        raise ValueError(
            f"label dims {labels.height}x{labels.width} not divisible by window {wh}x{ww}")
    if cfg.class_weights.shape[0] != classes.num_classes:
        raise ValueError(
            f"expected {classes.num_classes} class weights, got {cfg.class_weights.shape[0]}")

    h_lat, w_lat = labels.height // wh, labels.width // ww
    c = classes.num_classes
    grid = labels.data.reshape(h_lat, wh, w_lat, ww).transpose(0, 2, 1, 3).reshape(-1, wh * ww)

    window_idx = np.repeat(np.arange(grid.shape[0]), wh * ww)
    flat = grid.ravel()
    keep = flat != labels.void_id
    counts = np.bincount(window_idx[keep] * c + flat[keep], minlength=grid.shape[0] * c)
    bins = counts.reshape(-1, c).astype(np.float64) * cfg.class_weights

    order = np.argsort(bins, axis=1)
    best = order[:, -1]
    top = bins[np.arange(bins.shape[0]), best]
    second = bins[np.arange(bins.shape[0]), order[:, -2]] if c > 1 else np.zeros_like(top)

    out = np.full(bins.shape[0], labels.void_id, dtype=np.int64)
    assigned = (top > 0) & (second < cfg.peak_ratio * top)
    out[assigned] = best[assigned]
    return LabelMap(out.reshape(h_lat, w_lat), void_id=labels.void_id)
