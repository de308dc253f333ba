"""Central finite-difference validation of every analytic gradient.

Loss functions are exposed as callables of a flat parameter vector returning
``(value, grad)``. Instances are rejection-sampled away from the
non-differentiable loci of each loss (L1 kinks, filter thresholds,
absolute-value zeros, rectifier zeros) so central differences are valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelMap, make_rng, softmax
from .losses import (LossWeights, clustering_loss, entropy_min_loss, norm_alignment_loss,
                     perpendicularity_loss, weighted_cross_entropy)
from .prototypes import FeatureSet, PrototypeBank


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    mean_rel_err: float
    instances: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: max_rel_err={self.max_rel_err:.3e} "
                f"mean_rel_err={self.mean_rel_err:.3e} instances={self.instances} tol={self.tol:g}")


def check(loss_fn, point: np.ndarray, h: float = 1e-5, tol: float = 1e-4,
          name: str = "loss") -> GradCheckReport:
    """Compare the analytic gradient of ``loss_fn`` at ``point`` to central differences."""
    point = np.asarray(point, dtype=np.float64)
    value, grad = loss_fn(point)
    if not np.isfinite(value) or not np.isfinite(grad).all():
        raise ValueError(f"{name}: non-finite evaluation at the base point")
    fd = np.empty_like(point)
    for i in range(point.size):
        xp = point.copy(); xp[i] += h
        xm = point.copy(); xm[i] -= h
        vp, _ = loss_fn(xp)
        vm, _ = loss_fn(xm)
        if not (np.isfinite(vp) and np.isfinite(vm)):
            raise ValueError(f"{name}: non-finite evaluation while probing coordinate {i}")
        fd[i] = (vp - vm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-8)
    rel = np.abs(fd - grad) / denom
    return GradCheckReport(name, float(rel.max()), float(rel.mean()), 1, tol)


def merge_reports(name: str, reports) -> GradCheckReport:
    return GradCheckReport(
        name,
        max(r.max_rel_err for r in reports),
        float(np.mean([r.mean_rel_err for r in reports])),
        sum(r.instances for r in reports),
        reports[0].tol,
    )


# ---------------------------------------------------------------------------
# per-loss instance samplers; every sampler keeps coordinates > 10h from kinks


def _sample_away(draw, margin_fn, rng, h: float, attempts: int = 200):
    for _ in range(attempts):
        inst = draw(rng)
        if margin_fn(inst) > 10 * h:
            return inst
    raise RuntimeError("could not sample an instance away from non-differentiable loci")


def ce_instance(rng, h: float = 1e-5, hw: int = 3, c: int = 4):
    logits = rng.normal(size=(hw, hw, c))
    y = rng.integers(0, c, size=(hw, hw))
    y[rng.random(size=(hw, hw)) < 0.2] = 255
    if (y == 255).all():
        y[0, 0] = 0
    labels = LabelMap(y, void_id=255)
    cw = rng.uniform(0.2, 1.0, size=c)

    def fn(x):
        probs = softmax(x.reshape(hw, hw, c), axis=-1)
        v, g = weighted_cross_entropy(probs, labels, cw)
        return v, g.ravel()
    return fn, logits.ravel()


def clustering_instance(rng, h: float = 1e-5, k: int = 6, c: int = 3):
    protos = rng.uniform(0.5, 2.0, size=(c, k))
    bank = PrototypeBank(c, k)
    bank.update({i: protos[i] for i in range(c)})
    counts = rng.integers(1, 5, size=c)

    def draw(r):
        return [r.uniform(0.0, 3.0, size=(counts[i], k)) for i in range(c)]

    def margin(vecs):
        return min(np.abs(protos[i][None, :] - vecs[i]).min() for i in range(c))

    vecs = _sample_away(draw, margin, rng, h)
    sizes = [v.size for v in vecs]

    def fn(x):
        out, pos = {}, 0
        for i in range(c):
            out[i] = FeatureSet(i, x[pos:pos + sizes[i]].reshape(counts[i], k))
            pos += sizes[i]
        v, g = clustering_loss(out, bank)
        return v, np.concatenate([g[i].ravel() for i in range(c)])
    return fn, np.concatenate([v.ravel() for v in vecs])


def perpendicularity_instance(rng, h: float = 1e-5, k: int = 5, c: int = 4, eta: float = 0.8):
    prev = rng.uniform(0.5, 2.0, size=(c, k))
    present = sorted(rng.choice(c, size=rng.integers(2, c + 1), replace=False).tolist())
    centroids0 = rng.uniform(0.5, 2.0, size=(len(present), k))

    def fn(x):
        cents = {int(ci): x.reshape(len(present), k)[i] for i, ci in enumerate(present)}
        bank = PrototypeBank(c, k, eta=eta)
        bank.prototypes = prev.copy()
        bank.initialized[:] = True
        bank.update(cents)
        v, g = perpendicularity_loss(bank, cents, eta)
        return v, np.concatenate([g[int(ci)] for ci in present])
    return fn, centroids0.ravel()


def norm_instance(rng, h: float = 1e-5, k: int = 6, ns: int = 4, nt: int = 3):
    fbar = float(rng.uniform(1.0, 2.0))
    weights = LossWeights(norm_target=fbar)

    def draw(r):
        return r.uniform(0.1, 2.5, size=(ns + nt, k))

    def margin(vecs):
        thr_margin = np.abs(vecs - vecs.mean(axis=1, keepdims=True)).min()
        filt = np.where(vecs >= vecs.mean(axis=1, keepdims=True), vecs, 0.0)
        res_margin = np.abs((fbar + weights.delta_f) - np.sqrt((filt ** 2).sum(axis=1))).min()
        return min(thr_margin, res_margin)

    vecs = _sample_away(draw, margin, rng, h)

    def fn(x):
        v = x.reshape(ns + nt, k)
        val, gs, gt, _ = norm_alignment_loss(v[:ns], v[ns:], weights)
        return val, np.concatenate([gs.ravel(), gt.ravel()])
    return fn, vecs.ravel()


def em_instance(rng, h: float = 1e-5, n: int = 6, c: int = 4):
    logits = rng.normal(size=(n, c))

    def fn(x):
        probs = softmax(x.reshape(n, c), axis=-1)
        v, g = entropy_min_loss(probs)
        return v, g.ravel()
    return fn, logits.ravel()


def quadratic_instance(rng, h: float = 1e-5, n: int = 8):
    x0 = rng.normal(size=n)

    def fn(x):
        return float((x ** 2).sum()), 2 * x
    return fn, x0


def logsumexp_instance(rng, h: float = 1e-5, n: int = 8):
    x0 = rng.normal(size=n)

    def fn(x):
        m = x.max()
        lse = m + np.log(np.exp(x - m).sum())
        return float(lse), softmax(x)
    return fn, x0


SAMPLERS = {
    "ce": ce_instance,
    "clustering": clustering_instance,
    "perpendicularity": perpendicularity_instance,
    "norm": norm_instance,
    "em": em_instance,
}


def run_loss_check(name: str, seed: int = 0, instances: int = 100, h: float = 1e-5,
                   tol: float = 1e-4) -> GradCheckReport:
    """Run ``instances`` seeded finite-difference checks for one loss."""
    if name == "end_to_end":
        from .trainer import end_to_end_instance
        sampler = end_to_end_instance
    else:
        sampler = SAMPLERS[name]
    reports = []
    for i in range(instances):
        fn, point = sampler(make_rng(seed, stream=1000 + i), h=h)
        reports.append(check(fn, point, h=h, tol=tol, name=name))
    return merge_reports(name, reports)


def run_all(seed: int = 0, instances: int = 100, h: float = 1e-5, tol: float = 1e-4):
    names = ["ce", "clustering", "perpendicularity", "norm", "em", "end_to_end"]
    return [run_loss_check(n, seed=seed, instances=instances, h=h, tol=tol) for n in names]
