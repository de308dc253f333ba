"""Shaping losses with hand-derived gradients.

Five terms make up the training objective: weighted source cross-entropy,
an L1 clustering pull toward class prototypes, a cosine perpendicularity
penalty between smoothed prototypes, a relative norm-alignment objective
over mean-filtered feature vectors, and a max-squares entropy term. Each
returns its value together with the gradient of that value w.r.t. its
differentiable inputs, so the trainer can assemble exact feature and logit
gradients without an autodiff engine.

Gradient routing conventions (fixed on purpose, see the individual losses):
the clustering centers are constants, the perpendicularity loss reaches the
current batch centroids only through the (1 - eta) share of the smoothing
update, and channels suppressed by the norm filter receive exactly zero
gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import LabelMap
from .prototypes import FeatureSet, PrototypeBank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.1
    lambda_p: float = 0.1
    lambda_n: float = 0.025
    lambda_em: float = 0.1
    delta_f: float = 0.1
    norm_target: float | None = None  # mean filtered source norm of the previous step

    def __post_init__(self):
        for name in ("lambda_c", "lambda_p", "lambda_n", "lambda_em", "delta_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.norm_target is not None and self.norm_target <= 0:
            raise ValueError(f"norm_target must be positive once set, got {self.norm_target}")

    def with_norm_target(self, value: float) -> "LossWeights":
        return replace(self, norm_target=value)


@dataclass
class LossBundle:
    """Scalar loss parts plus lambda-scaled gradients keyed by input name."""

    values: dict
    grads: dict

    @property
    def total(self) -> float:
        return self.values["total"]


def weighted_cross_entropy(probs: np.ndarray, labels: LabelMap, class_weights: np.ndarray):
    """Class-weighted CE over non-void pixels; gradient is w.r.t. the logits.

    value = -(sum_px w[y] log p[y]) / sum_px w[y]; the logit gradient is the
    usual (p - onehot) scaled per pixel by w[y] / normalizer.
    """
    probs = np.asarray(probs, dtype=np.float64)
    h, w, c = probs.shape
    if (labels.height, labels.width) != (h, w):
        raise ValueError(f"probs {h}x{w} vs labels {labels.height}x{labels.width}")
    y = labels.data
    valid = y != labels.void_id
    if not valid.any():
        raise ValueError("no supervised pixels: label map is entirely void")
    yv = y[valid]
    pixw = np.asarray(class_weights, dtype=np.float64)[yv]
    norm = pixw.sum()
    p_true = probs[valid, yv]
    value = float(-(pixw * np.log(p_true)).sum() / norm)

    grad = np.zeros_like(probs)
    grad[valid] = probs[valid] * (pixw / norm)[:, None]
    grad[valid, yv] -= pixw / norm
    return value, grad


def clustering_loss(sets: dict, bank: PrototypeBank):
    """Mean per-channel L1 distance between vectors and their class prototype.

    Only classes with an initialized prototype and a non-empty set contribute;
    the normalizer is the count of contributing classes. Prototypes are
    treated as constants, so the gradient only reaches the feature vectors.
    """
    contrib = [c for c, s in sorted(sets.items()) if len(s) > 0 and bank.initialized[c]]
    grads = {c: np.zeros_like(s.vectors) for c, s in sets.items()}
    if not contrib:
        log.debug("clustering_loss: no contributing class in batch")
        return 0.0, grads
    m = len(contrib)
    k = bank.num_channels
    value = 0.0
    for c in contrib:
        vecs = sets[c].vectors
        diff = bank.prototypes[c][None, :] - vecs
        value += np.abs(diff).mean()
        grads[c] = -np.sign(diff) / (k * len(vecs) * m)
    return float(value / m), grads


def perpendicularity_loss(bank: PrototypeBank, batch_centroids: dict, eta: float):
    """Mean pairwise cosine between initialized smoothed prototypes.

    All initialized classes shape the value; gradients flow only into the
    centroids of classes present in the batch, through the (1 - eta) term of
    the smoothing update.
    """
    ids = bank.initialized_ids()
    if ids.size < 2:
        raise ValueError(f"need >= 2 initialized prototypes, got {ids.size}")
    p = bank.prototypes[ids]
    norms = np.sqrt((p ** 2).sum(axis=1))
    if (norms == 0).any():
        zero = ids[norms == 0].tolist()
        raise ValueError(f"cannot normalize zero-norm prototype(s) for class(es) {zero}")
    unit = p / norms[:, None]
    cos = unit @ unit.T
    m = ids.size
    value = float((cos.sum() - np.trace(cos)) / (m * (m - 1)))

    grads = {}
    pos = {int(c): i for i, c in enumerate(ids)}
    for c in sorted(batch_centroids):
        if c not in pos:
            continue
        i = pos[c]
        others = np.delete(np.arange(m), i)
        # d cos(p_i, p_j) / d p_i = u_j / |p_i| - cos * u_i / |p_i|, summed over j;
        # ordered pairs double every unordered pair.
        d = (unit[others] - cos[i, others][:, None] * unit[i][None, :]) / norms[i]
        grads[c] = 2.0 * d.sum(axis=0) * (1.0 - eta) / (m * (m - 1))
    return value, grads


def norm_filter(feat: np.ndarray) -> np.ndarray:
    """Zero out channels strictly below the vector's own channel mean."""
    feat = np.asarray(feat, dtype=np.float64)
    return np.where(feat >= feat.mean(), feat, 0.0)


def _filter_mask(vectors: np.ndarray) -> np.ndarray:
    return vectors >= vectors.mean(axis=1, keepdims=True)


def norm_alignment_loss(source_vectors: np.ndarray, target_vectors: np.ndarray,
                        weights: LossWeights):
    """Relative deviation of filtered vector norms from the running source target.

    Pools source and target vectors regardless of labeling. On the first call
    (no norm target yet) the loss is skipped and only the new target — the
    mean filtered source norm of this step — is returned. All-zero vectors
    have no defined gradient direction and are dropped from the mean.

    Returns (value, grad_source, grad_target, new_norm_target).
    """
    source_vectors = np.asarray(source_vectors, dtype=np.float64).reshape(-1, source_vectors.shape[-1])
    target_vectors = np.asarray(target_vectors, dtype=np.float64).reshape(-1, target_vectors.shape[-1])
    ns = source_vectors.shape[0]
    pooled = np.concatenate([source_vectors, target_vectors])
    mask = _filter_mask(pooled)
    filtered = np.where(mask, pooled, 0.0)
    norms = np.sqrt((filtered ** 2).sum(axis=1))

    live = norms > 0.0
    if not live.all():
        log.debug("norm_alignment_loss: dropping %d all-zero vector(s)", int((~live).sum()))
    src_norms = norms[:ns][live[:ns]]
    if src_norms.size == 0:
        raise ValueError("no usable source vector to derive the norm target from")
    new_target = float(src_norms.mean())

    g_src = np.zeros_like(source_vectors)
    g_tgt = np.zeros_like(target_vectors)
    if weights.norm_target is None:
        return 0.0, g_src, g_tgt, new_target

    fbar = weights.norm_target
    goal = fbar + weights.delta_f
    residual = goal - norms
    n_live = int(live.sum())
    value = float(np.abs(residual[live]).sum() / (fbar * n_live))

    scale = np.zeros_like(norms)
    scale[live] = -np.sign(residual[live]) / (norms[live] * fbar * n_live)
    grad = filtered * scale[:, None]        # zero on suppressed channels by construction
    g_src, g_tgt = grad[:ns], grad[ns:]
    return value, g_src, g_tgt, new_target


def entropy_min_loss(probs: np.ndarray):
    """Max-squares confidence objective; gradient is w.r.t. the logits.

    value = -(1/2N) sum_px sum_c p^2, which is minimized by one-hot rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    rows = probs.reshape(-1, probs.shape[-1])
    n = rows.shape[0]
    value = float(-(rows ** 2).sum() / (2 * n))
    # chain through the softmax Jacobian: dL/dz_k = (p_k / N) (sum_c p_c^2 - p_k)
    sq = (rows ** 2).sum(axis=1, keepdims=True)
    grad = (rows * (sq - rows)) / n
    return value, grad.reshape(probs.shape)


def total_loss(parts: dict, weights: LossWeights) -> LossBundle:
    """Weighted sum of loss parts; gradients accumulate per named input.

    ``parts`` maps part name (ce, clust, perp, norm, em) to
    ``(value, {input_name: grad_or_dict})``. Missing parts count as zero.
    """
    lam = {"ce": 1.0, "clust": weights.lambda_c, "perp": weights.lambda_p,
           "norm": weights.lambda_n, "em": weights.lambda_em}
    values = {name: 0.0 for name in lam}
    grads: dict = {}
    for name, (value, part_grads) in parts.items():
        if name not in lam:
            raise ValueError(f"unknown loss part {name!r}")
        values[name] += float(value)
        for key, g in part_grads.items():
            _accumulate(grads, key, g, lam[name])
    values["total"] = (values["ce"] + weights.lambda_c * values["clust"]
                       + weights.lambda_p * values["perp"] + weights.lambda_n * values["norm"]
                       + weights.lambda_em * values["em"])
    for v in values.values():
        if not np.isfinite(v):
            raise ValueError(f"non-finite loss value in bundle: {values}")
    return LossBundle(values=values, grads=grads)


def _accumulate(acc: dict, key, g, lam: float) -> None:
    if lam == 0.0:
        return
    if isinstance(g, dict):
        sub = acc.setdefault(key, {})
        for k, v in g.items():
            _accumulate(sub, k, v, lam)
    else:
        if key in acc:
            acc[key] = acc[key] + lam * g
        else:
            acc[key] = lam * np.asarray(g, dtype=np.float64)
