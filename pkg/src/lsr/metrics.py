"""Segmentation metrics: confusion matrices, IoU, the adapted-to-supervised
ratio aggregate, and the latent-space diagnostic statistics (inter-prototype
angles, channel entropies, class frequency histograms)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ClassSet, LabelMap
from .prototypes import PrototypeBank

log = logging.getLogger(__name__)


def confusion_matrix(pred: LabelMap, gt: LabelMap, classes: ClassSet) -> np.ndarray:
    """(C+1) x C counts, rows = prediction (last row: pred void), cols = ground truth.

    Ground-truth void pixels are ignored entirely.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError(f"pred dims {pred.height}x{pred.width} != gt dims {gt.height}x{gt.width}")
    c = classes.num_classes
    p, g = pred.data.ravel(), gt.data.ravel()
    keep = g != gt.void_id
    p, g = p[keep], g[keep]
    prow = np.where(p == pred.void_id, c, p)
    flat = np.bincount(prow * c + g, minlength=(c + 1) * c)
    return flat.reshape(c + 1, c)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; classes with empty union come back as NaN (absent)."""
    c = conf.shape[1]
    tp = np.diag(conf[:c]).astype(np.float64)
    fp = conf[:c].sum(axis=1) - tp
    fn = conf.sum(axis=0) - tp
    union = tp + fp + fn
    iou = np.full(c, np.nan)
    nz = union > 0
    iou[nz] = tp[nz] / union[nz]
    return iou


def confusion_and_iou(pred: LabelMap, gt: LabelMap, classes: ClassSet) -> np.ndarray:
    return iou_from_confusion(confusion_matrix(pred, gt, classes))


def mean_iou(iou: np.ndarray) -> float:
    present = np.isfinite(iou)
    if not present.any():
        return float("nan")
    return float(iou[present].mean())


@dataclass
class ClassReport:
    """Per-class IoU / ASR plus aggregates, optionally over a restricted subset."""

    class_ids: list
    class_names: list
    adapted_iou: np.ndarray
    supervised_iou: np.ndarray | None = None
    asr: np.ndarray | None = None
    miou: float = float("nan")
    miou_restricted: float = float("nan")
    masr: float = float("nan")
    masr_restricted: float = float("nan")
    restricted_ids: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["class_id", "class_name", "iou", "supervised_iou", "asr"])
            for i, cid in enumerate(self.class_ids):
                sup = "" if self.supervised_iou is None else _fmt(self.supervised_iou[i])
                asr = "" if self.asr is None else _fmt(self.asr[i])
                wr.writerow([cid, self.class_names[i], _fmt(self.adapted_iou[i]), sup, asr])
            wr.writerow([-1, "mean", _fmt(self.miou), "", _fmt(self.masr)])
            if self.restricted_ids:
                wr.writerow([-2, "mean_restricted", _fmt(self.miou_restricted), "",
                             _fmt(self.masr_restricted)])


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.10g}"


def read_iou_csv(path) -> dict:
    """Read ``class_id -> iou`` from a report CSV, skipping aggregate rows and NaNs."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cid = int(row["class_id"])
            if cid < 0:
                continue
            val = row["iou"].strip()
            if val and val.lower() != "nan":
                out[cid] = float(val)
    return out


def masr(adapted_iou: dict, supervised_iou: dict, restrict=None,
         class_names: dict | None = None) -> ClassReport:
    """Mean adapted-to-supervised ratio (x100) over shared, usable classes.

    Classes whose supervised IoU is zero are excluded with a warning: the
    ratio is undefined there. Ratios above 100 are kept as-is.
    """
    shared = sorted(set(adapted_iou) & set(supervised_iou))
    if not shared:
        raise ValueError("no class shared between adapted and supervised IoUs")
    usable = []
    for c in shared:
        if supervised_iou[c] == 0:
            log.warning("masr: class %d has zero supervised IoU, excluded", c)
        else:
            usable.append(c)
    if not usable:
        raise ValueError("every shared class has zero supervised IoU")

    adapted = np.array([adapted_iou[c] for c in usable])
    sup = np.array([supervised_iou[c] for c in usable])
    ratios = adapted / sup * 100.0
    names = [class_names.get(c, f"class{c}") if class_names else f"class{c}" for c in usable]

    rep = ClassReport(
        class_ids=usable, class_names=names, adapted_iou=adapted,
        supervised_iou=sup, asr=ratios,
        miou=float(adapted.mean()), masr=float(ratios.mean()),
    )
    if restrict is not None:
        sel = [i for i, c in enumerate(usable) if c in set(restrict)]
        missing = sorted(set(restrict) - set(usable))
        if missing:
            log.warning("masr: restricted classes %s unavailable, skipped", missing)
        if not sel:
            raise ValueError("restricted class set has no usable class")
        rep.restricted_ids = [usable[i] for i in sel]
        rep.miou_restricted = float(adapted[sel].mean())
        rep.masr_restricted = float(ratios[sel].mean())
    return rep


def mean_inter_prototype_angle(bank: PrototypeBank) -> dict:
    """Per-class mean angle (degrees) to every other initialized prototype."""
    ids = bank.initialized_ids()
    p = bank.prototypes[ids]
    norms = np.sqrt((p ** 2).sum(axis=1))
    keep = norms > 0
    if keep.sum() < 2:
        raise ValueError("need >= 2 initialized nonzero prototypes")
    if not keep.all():
        log.warning("angle: zero-norm prototype(s) for class(es) %s excluded",
                    ids[~keep].tolist())
    ids, p, norms = ids[keep], p[keep], norms[keep]
    unit = p / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    m = ids.size
    out = {}
    for i, c in enumerate(ids):
        out[int(c)] = float((ang[i].sum() - ang[i, i]) / (m - 1))
    return out


def mean_channel_entropy(sets: dict) -> dict:
    """Per-class mean entropy (nats) of channel activations normalized to a distribution."""
    out = {}
    for c, fset in sorted(sets.items()):
        vecs = fset.vectors
        sums = vecs.sum(axis=1)
        keep = sums > 0
        if not keep.all():
            log.warning("entropy: %d all-zero vector(s) in class %d excluded",
                        int((~keep).sum()), c)
        if not keep.any():
            continue
        q = vecs[keep] / sums[keep, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(q > 0, -q * np.log(q), 0.0)
        out[int(c)] = float(terms.sum(axis=1).mean())
    return out


def label_histogram(labels, classes: ClassSet) -> np.ndarray:
    """Fraction of non-void cells per class over a list of label maps."""
    counts = np.zeros(classes.num_classes, dtype=np.int64)
    for lm in labels:
        valid = lm.data[lm.data != lm.void_id]
        counts += np.bincount(valid, minlength=classes.num_classes)
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)
