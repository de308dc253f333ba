"""Distance-based two-pass pseudo-labeling of target latent vectors.

Pass 1 classifies every target vector against the smoothed source prototypes
and keeps only confident assignments, whose per-class means become the target
centroids. Pass 2 relabels every vector against those centroids; anything
that again fails the confidence threshold becomes void. No network softmax
output is involved at any point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import VOID_DEFAULT, LabelMap, LatentFeatureMap, softmax
from .prototypes import PrototypeBank


@dataclass(frozen=True)
class PseudoLabelConfig:
    tau: float = 0.5

    def validate(self, num_classes: int) -> "PseudoLabelConfig":
        if not (1.0 / num_classes <= self.tau < 1.0):
            raise ValueError(f"tau must lie in [1/{num_classes}, 1), got {self.tau}")
        return self


def assign_probs(vectors: np.ndarray, prototypes: np.ndarray, initialized: np.ndarray) -> np.ndarray:
    """Softmax over classes of negative Euclidean distances, batched.

    Uninitialized classes are excluded from the softmax support and get
    probability exactly 0.
    """
    ids = np.flatnonzero(initialized)
    if ids.size == 0:
        raise ValueError("no initialized prototype to classify against")
    diffs = vectors[:, None, :] - prototypes[ids][None, :, :]
    dists = np.sqrt((diffs ** 2).sum(axis=2))
    probs = np.zeros((vectors.shape[0], prototypes.shape[0]), dtype=np.float64)
    probs[:, ids] = softmax(-dists, axis=1)
    return probs


def soft_assign(feat: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Class probabilities of a single K-vector against a prototype bank."""
    feat = np.asarray(feat, dtype=np.float64)
    return assign_probs(feat[None, :], bank.prototypes, bank.initialized)[0]


def two_pass_label(feats, source_bank: PrototypeBank, cfg: PseudoLabelConfig):
    """Label a batch of target feature maps; returns (label maps, target centroids).

    Classes whose provisional set comes back empty fall back to the source
    prototype so pass 2 always sees the full set of initialized centers.
    """
    if not feats:
        raise ValueError("empty target batch")
    labels, centroids, _ = two_pass_detail(feats, source_bank, cfg)
    return labels, centroids


def two_pass_detail(feats, source_bank: PrototypeBank, cfg: PseudoLabelConfig,
                    void_id: int | None = None):
    """two_pass_label plus the pass-2 probability rows (for confidence stats)."""
    num_classes = source_bank.num_classes
    cfg.validate(num_classes)
    if void_id is None:
        void_id = VOID_DEFAULT if VOID_DEFAULT >= num_classes else num_classes

    all_vecs = np.concatenate([fm.vectors() for fm in feats])
    ids = source_bank.initialized_ids()

    probs1 = assign_probs(all_vecs, source_bank.prototypes, source_bank.initialized)
    target_protos = source_bank.prototypes.copy()
    centroids = {}
    for c in ids:
        members = probs1[:, c] > cfg.tau
        if members.any():
            target_protos[c] = all_vecs[members].mean(axis=0)
        centroids[int(c)] = target_protos[c].copy()

    probs2 = assign_probs(all_vecs, target_protos, source_bank.initialized)
    best = probs2.argmax(axis=1)
    confident = probs2[np.arange(all_vecs.shape[0]), best] > cfg.tau
    flat = np.where(confident, best, void_id).astype(np.int64)

    labels, offset = [], 0
    for fm in feats:
        n = fm.h_lat * fm.w_lat
        labels.append(LabelMap(flat[offset:offset + n].reshape(fm.h_lat, fm.w_lat), void_id=void_id))
        offset += n
    return labels, centroids, probs2
