"""Per-class feature sets, batch centroids and smoothed prototype tracking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ClassSet, LabelMap, LatentFeatureMap


@dataclass
class FeatureSet:
    """Latent vectors of one class, with their (map, h, w) source locations."""

    class_id: int
    vectors: np.ndarray            # (n, K)
    origin: str = "source"         # source | target
    locations: np.ndarray | None = None  # (n, 3) int, for gradient routing

    def __len__(self) -> int:
        return self.vectors.shape[0]


def gather_class_features(feats, labels, classes: ClassSet, origin: str = "source"):
    """Split latent vectors by their latent-res labels.

    Returns ``(sets, void_set)`` where ``sets`` maps class id -> FeatureSet for
    every class with at least one vector. Void-labeled vectors land in
    ``void_set`` and take part in nothing except the norm objective.
    """
    if len(feats) != len(labels):
        raise ValueError(f"got {len(feats)} feature maps but {len(labels)} label maps")
    per_class_vecs = {c: [] for c in classes.ids()}
    per_class_locs = {c: [] for c in classes.ids()}
    void_vecs, void_locs = [], []
    for n, (fm, lm) in enumerate(zip(feats, labels)):
        if (fm.h_lat, fm.w_lat) != (lm.height, lm.width):
            raise ValueError(
                f"map {n}: feature dims {fm.h_lat}x{fm.w_lat} != label dims {lm.height}x{lm.width}")
        flat_labels = lm.data.ravel()
        vecs = fm.vectors()
        hw = np.stack(np.unravel_index(np.arange(flat_labels.size), (lm.height, lm.width)), axis=1)
        locs = np.column_stack([np.full(flat_labels.size, n), hw])
        for c in classes.ids():
            mask = flat_labels == c
            if mask.any():
                per_class_vecs[c].append(vecs[mask])
                per_class_locs[c].append(locs[mask])
        vmask = flat_labels == lm.void_id
        if vmask.any():
            void_vecs.append(vecs[vmask])
            void_locs.append(locs[vmask])

    sets = {}
    for c in classes.ids():
        if per_class_vecs[c]:
            sets[c] = FeatureSet(c, np.concatenate(per_class_vecs[c]), origin,
                                 np.concatenate(per_class_locs[c]))
    void_set = FeatureSet(
        classes.void_id,
        np.concatenate(void_vecs) if void_vecs else np.zeros((0, feats[0].channels if feats else 0)),
        origin,
        np.concatenate(void_locs) if void_locs else np.zeros((0, 3), dtype=np.int64),
    )
    return sets, void_set


def batch_centroid(fset: FeatureSet) -> np.ndarray:
    """Arithmetic per-channel mean of a non-empty feature set."""
    if len(fset) == 0:
        raise ValueError(f"class {fset.class_id} absent in batch: centroid undefined")
    return fset.vectors.mean(axis=0)


class PrototypeBank:
    """Exponentially smoothed per-class prototypes.

    A class starts uninitialized (zero vector, flag False); its first observed
    centroid is copied verbatim rather than blended with the zero init, which
    at small scale would visibly drag early prototypes toward the origin.
    Later updates blend with factor ``eta``; classes absent from a batch keep
    their previous estimate.
    """

    def __init__(self, num_classes: int, num_channels: int, eta: float = 0.8,
                 log_trajectory: bool = False):
        if not (0.0 <= eta <= 1.0):
            raise ValueError(f"eta must lie in [0,1], got {eta}")
        self.num_classes = num_classes
        self.num_channels = num_channels
        self.eta = eta
        self.prototypes = np.zeros((num_classes, num_channels), dtype=np.float64)
        self.initialized = np.zeros(num_classes, dtype=bool)
        self.trajectory: list = [] if log_trajectory else None

    def update(self, centroids: dict, step: int = 0) -> "PrototypeBank":
        for c, vec in sorted(centroids.items()):
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.num_channels,):
                raise ValueError(f"class {c}: centroid shape {vec.shape} != ({self.num_channels},)")
            if self.initialized[c]:
                self.prototypes[c] = self.eta * self.prototypes[c] + (1.0 - self.eta) * vec
            else:
                self.prototypes[c] = vec
                self.initialized[c] = True
            if self.trajectory is not None:
                self.trajectory.append((step, c, self.prototypes[c].copy()))
        return self

    def initialized_ids(self) -> np.ndarray:
        return np.flatnonzero(self.initialized)

    def get(self, c: int) -> np.ndarray:
        return self.prototypes[c]

    def save_trajectory_csv(self, path) -> None:
        if self.trajectory is None:
            raise ValueError("trajectory logging was not enabled")
        with open(path, "w") as fh:
            fh.write("step,class_id," + ",".join(f"p{k}" for k in range(self.num_channels)) + "\n")
            for step, c, vec in self.trajectory:
                fh.write(f"{step},{c}," + ",".join(f"{v:.10g}" for v in vec) + "\n")
