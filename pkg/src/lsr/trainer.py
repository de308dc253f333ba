"""Desk-scale encoder-decoder segmentation trainer with manual backprop.

The network maps each non-overlapping image window through a two-layer
rectified affine encoder to a non-negative latent vector, classifies it with
an affine decoder, and nearest-upsamples the class probabilities back to
full resolution. Three regimes share the loop: supervised training on the
target domain (the reference upper bound), supervised training on the source
domain only (the baseline), and the full adaptation run that adds the
latent-space shaping losses on top of source supervision.

Everything is deterministic given (seed, config): data order, weight init
and all arithmetic derive from counter-based streams.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ClassSet, LabelMap, LatentFeatureMap, make_rng, softmax
from .decimation import DecimationConfig, class_frequency_weights, decimate
from .losses import (LossBundle, LossWeights, clustering_loss, entropy_min_loss,
                     norm_alignment_loss, perpendicularity_loss, total_loss,
                     weighted_cross_entropy)
from .metrics import (ClassReport, confusion_matrix, iou_from_confusion, masr, mean_iou,
                      mean_channel_entropy, mean_inter_prototype_angle, read_iou_csv)
from .prototypes import FeatureSet, PrototypeBank, batch_centroid, gather_class_features
from .pseudolabel import PseudoLabelConfig, two_pass_detail
from .synth import load_manifest

log = logging.getLogger(__name__)

REGIMES = ("target", "source", "adapt")

CHECKPOINT_MAGIC = "LSRCKPT"
METRIC_COLUMNS = ("step", "lr", "ce", "clust", "perp", "norm", "em", "total",
                  "val_ce", "mean_conf", "target_miou", "masr",
                  "proto_angle", "channel_entropy")


@dataclass(frozen=True)
class NetConfig:
    window_h: int = 4
    window_w: int = 4
    hidden: int = 32
    channels: int = 16
    num_classes: int = 5

    @property
    def input_dim(self) -> int:
        return self.window_h * self.window_w * 3


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    total_steps: int = 5000

    def __post_init__(self):
        if min(self.base_lr, self.weight_decay, self.poly_power) < 0 or self.total_steps <= 0:
            raise ValueError("optimizer settings must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")

    def lr_at(self, step: int) -> float:
        if step >= self.total_steps:
            raise ValueError(f"step {step} >= total_steps {self.total_steps}")
        return self.base_lr * (1.0 - step / self.total_steps) ** self.poly_power


@dataclass
class TrainSettings:
    net: NetConfig = field(default_factory=NetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    eta: float = 0.8
    peak_ratio: float = 0.5
    warm_steps: int = 500
    eval_every: int = 250
    patience: int = 0              # early-stopping patience in evals; 0 disables
    log_trajectory: bool = False
    reference_iou_csv: str = ""    # optional supervised reference for mASR columns


class TinySegNet:
    """Two-layer rectified window encoder plus affine per-cell decoder."""

    def __init__(self, cfg: NetConfig, params: np.ndarray | None = None):
        self.cfg = cfg
        d_in, hid, k, c = cfg.input_dim, cfg.hidden, cfg.channels, cfg.num_classes
        self.sizes = [d_in * hid, hid, hid * k, k, k * c, c]
        self.n_params = sum(self.sizes)
        if params is None:
            params = np.zeros(self.n_params)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} params, got shape {params.shape}")
        self.params = np.asarray(params, dtype=np.float64)

    def views(self, flat: np.ndarray):
        cfg = self.cfg
        offs = np.cumsum([0] + self.sizes)
        w1 = flat[offs[0]:offs[1]].reshape(cfg.input_dim, cfg.hidden)
        b1 = flat[offs[1]:offs[2]]
        w2 = flat[offs[2]:offs[3]].reshape(cfg.hidden, cfg.channels)
        b2 = flat[offs[3]:offs[4]]
        w3 = flat[offs[4]:offs[5]].reshape(cfg.channels, cfg.num_classes)
        b3 = flat[offs[5]:offs[6]]
        return w1, b1, w2, b2, w3, b3

    def init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        w1 = rng.normal(size=(cfg.input_dim, cfg.hidden)) / np.sqrt(cfg.input_dim)
        b1 = np.full(cfg.hidden, 0.1)
        w2 = rng.normal(size=(cfg.hidden, cfg.channels)) / np.sqrt(cfg.hidden)
        b2 = np.full(cfg.channels, 0.1)
        w3 = rng.normal(size=(cfg.channels, cfg.num_classes)) / np.sqrt(cfg.channels)
        b3 = np.zeros(cfg.num_classes)
        self.params = np.concatenate([w1.ravel(), b1, w2.ravel(), b2, w3.ravel(), b3])

    def windows(self, image: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        h, w, _ = image.shape
        if h % cfg.window_h or w % cfg.window_w:
            raise ValueError(f"image dims {h}x{w} not divisible by window "
                             f"{cfg.window_h}x{cfg.window_w}")
        hl, wl = h // cfg.window_h, w // cfg.window_w
        return (image.reshape(hl, cfg.window_h, wl, cfg.window_w, 3)
                .transpose(0, 2, 1, 3, 4).reshape(hl * wl, cfg.input_dim)), hl, wl

    def forward_cache(self, image: np.ndarray) -> dict:
        w1, b1, w2, b2, w3, b3 = self.views(self.params)
        x, hl, wl = self.windows(np.asarray(image, dtype=np.float64))
        z1 = x @ w1 + b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ w2 + b2
        feats = np.maximum(z2, 0.0)
        logits = feats @ w3 + b3
        probs = softmax(logits, axis=1)
        probs_full = np.repeat(np.repeat(probs.reshape(hl, wl, -1), self.cfg.window_h, axis=0),
                               self.cfg.window_w, axis=1)
        return {"x": x, "z1": z1, "a1": a1, "z2": z2, "feats": feats,
                "logits": logits, "probs": probs, "probs_full": probs_full,
                "h_lat": hl, "w_lat": wl}

    def forward(self, image: np.ndarray):
        """Public contract: (latent feature map, full-resolution probabilities)."""
        cache = self.forward_cache(image)
        fmap = LatentFeatureMap(cache["feats"].reshape(cache["h_lat"], cache["w_lat"], -1))
        return fmap, cache["probs_full"]

    def backward(self, cache: dict, d_logits: np.ndarray, d_feats: np.ndarray) -> np.ndarray:
        """Exact chain rule from latent logit and feature gradients to flat params."""
        w1, b1, w2, b2, w3, b3 = self.views(self.params)
        dz3 = d_logits
        dw3 = cache["feats"].T @ dz3
        db3 = dz3.sum(axis=0)
        df = d_feats + dz3 @ w3.T
        dz2 = df * (cache["z2"] > 0)
        dw2 = cache["a1"].T @ dz2
        db2 = dz2.sum(axis=0)
        da1 = dz2 @ w2.T
        dz1 = da1 * (cache["z1"] > 0)
        dw1 = cache["x"].T @ dz1
        db1 = dz1.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3])

    def pool_full_grad(self, d_full: np.ndarray, hl: int, wl: int) -> np.ndarray:
        """Sum a full-resolution logit gradient over the pixels each cell feeds."""
        cfg = self.cfg
        c = d_full.shape[2]
        return (d_full.reshape(hl, cfg.window_h, wl, cfg.window_w, c)
                .sum(axis=(1, 3)).reshape(hl * wl, c))

    def predict(self, image: np.ndarray, void_id: int) -> LabelMap:
        _, probs_full = self.forward(image)
        return LabelMap(probs_full.argmax(axis=2), void_id=void_id)


def sgd_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray,
             cfg: OptimConfig, step: int) -> None:
    """Momentum SGD with decoupled-from-nothing weight decay and poly lr decay."""
    lr = cfg.lr_at(step)
    velocity *= cfg.momentum
    velocity += grads + cfg.weight_decay * params
    params -= lr * velocity


def save_checkpoint(path, net: TinySegNet, step: int, seed: int) -> None:
    cfg = net.cfg
    with open(path, "w") as fh:
        fh.write(f"{CHECKPOINT_MAGIC}\n")
        fh.write(f"step {step}\nseed {seed}\n")
        fh.write(f"window {cfg.window_h} {cfg.window_w}\n")
        fh.write(f"dims {cfg.hidden} {cfg.channels} {cfg.num_classes}\n")
        fh.write(f"count {net.n_params}\n")
        for v in net.params:
            fh.write(f"{v:.17g}\n")


def load_checkpoint(path) -> tuple:
    with open(path) as fh:
        if fh.readline().strip() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        step = int(fh.readline().split()[1])
        seed = int(fh.readline().split()[1])
        wh, ww = (int(t) for t in fh.readline().split()[1:])
        hid, k, c = (int(t) for t in fh.readline().split()[1:])
        count = int(fh.readline().split()[1])
        params = np.array([float(fh.readline()) for _ in range(count)])
    net = TinySegNet(NetConfig(wh, ww, hid, k, c), params)
    return net, step, seed


# ---------------------------------------------------------------------------
# training loop


class Dataset:
    """The four splits of a paired benchmark, held in memory."""

    def __init__(self, splits: dict):
        missing = {"source_train", "source_val", "target_train", "target_val"} - set(splits)
        if missing:
            raise ValueError(f"dataset missing splits: {sorted(missing)}")
        self.splits = splits

    @classmethod
    def from_dir(cls, data_dir: str) -> "Dataset":
        splits = {}
        for split in ("source_train", "source_val", "target_train", "target_val"):
            manifest = os.path.join(data_dir, f"{split}.txt")
            if not os.path.exists(manifest):
                raise FileNotFoundError(f"missing manifest {manifest}")
            splits[split] = load_manifest(manifest)
        return cls(splits)

    def with_target_images(self, transform) -> "Dataset":
        """Copy with ``transform(image, split, index)`` applied to target images."""
        splits = dict(self.splits)
        for split in ("target_train", "target_val"):
            images, labels = splits[split]
            splits[split] = ([transform(img, split, i) for i, img in enumerate(images)], labels)
        return Dataset(splits)

    def images(self, split):
        return self.splits[split][0]

    def labels(self, split):
        return self.splits[split][1]


def _ce_grad_full(net, cache, labels, class_weights):
    value, g_full = weighted_cross_entropy(cache["probs_full"], labels, class_weights)
    return value, net.pool_full_grad(g_full, cache["h_lat"], cache["w_lat"])


def _scatter_set_grads(target: np.ndarray, sets: dict, grads: dict, w_lat: int) -> None:
    for c, g in grads.items():
        fset = sets[c]
        if len(fset) == 0:
            continue
        idx = fset.locations[:, 1] * w_lat + fset.locations[:, 2]
        np.add.at(target, idx, g)


def _centroid_grads_to_feats(target: np.ndarray, sets: dict, grads: dict, w_lat: int) -> None:
    # d centroid / d member vector = 1/|set|
    for c, g in grads.items():
        fset = sets[c]
        idx = fset.locations[:, 1] * w_lat + fset.locations[:, 2]
        np.add.at(target, idx, np.repeat(g[None, :] / len(fset), len(fset), axis=0))


def run_regime(regime: str, data, settings: TrainSettings, seed: int,
               outdir: str) -> dict:
    """Train one regime, writing checkpoint, metrics.csv and report.csv to outdir.

    ``data`` is a dataset directory path or an in-memory Dataset.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}, expected one of {REGIMES}")
    os.makedirs(outdir, exist_ok=True)
    if not isinstance(data, Dataset):
        data = Dataset.from_dir(data)
    net_cfg, optim = settings.net, settings.optim
    classes = ClassSet(net_cfg.num_classes)
    void = classes.void_id

    sup_split = {"target": "target_train", "source": "source_train", "adapt": "source_train"}[regime]
    sup_weights = class_frequency_weights(data.labels(sup_split), classes)
    source_weights = (sup_weights if sup_split == "source_train"
                      else class_frequency_weights(data.labels("source_train"), classes))
    dec_cfg = DecimationConfig(net_cfg.window_h, net_cfg.window_w, source_weights,
                               settings.peak_ratio)
    latent_source = [decimate(lm, dec_cfg, classes) for lm in data.labels("source_train")]
    latent_target_val = [decimate(lm, dec_cfg, classes) for lm in data.labels("target_val")]

    net = TinySegNet(net_cfg)
    net.init_params(make_rng(seed, stream=1))
    velocity = np.zeros_like(net.params)
    rng_sup = make_rng(seed, stream=2)
    rng_tgt = make_rng(seed, stream=3)

    bank = PrototypeBank(net_cfg.num_classes, net_cfg.channels, eta=settings.eta,
                         log_trajectory=settings.log_trajectory)
    weights = settings.loss
    pseudo_cfg = settings.pseudo
    reference = read_iou_csv(settings.reference_iou_csv) if settings.reference_iou_csv else None

    rows, diag = [], {}
    best = {"criterion": np.inf, "params": None, "step": -1, "stale": 0}
    stop = False

    def evaluate(step: int, bundle_values: dict, lr: float):
        val_images = data.images("source_val" if regime != "target" else "target_val")
        val_labels = data.labels("source_val" if regime != "target" else "target_val")
        ce_vals = []
        for img, lab in zip(val_images, val_labels):
            cache = net.forward_cache(img)
            v, _ = weighted_cross_entropy(cache["probs_full"], lab, sup_weights)
            ce_vals.append(v)
        val_ce = float(np.mean(ce_vals))

        conf_mat = np.zeros((net_cfg.num_classes + 1, net_cfg.num_classes), dtype=np.int64)
        tgt_feats = []
        for img, lab in zip(data.images("target_val"), data.labels("target_val")):
            cache = net.forward_cache(img)
            pred = LabelMap(cache["probs_full"].argmax(axis=2), void_id=void)
            conf_mat += confusion_matrix(pred, lab, classes)
            tgt_feats.append(LatentFeatureMap(
                cache["feats"].reshape(cache["h_lat"], cache["w_lat"], -1)))
        iou = iou_from_confusion(conf_mat)
        miou = mean_iou(iou)

        mean_conf = np.nan
        angle = entropy = np.nan
        if regime == "adapt" and bank.initialized.sum() >= 2:
            try:
                _, _, probs2 = two_pass_detail(tgt_feats, bank, pseudo_cfg, void_id=void)
                mean_conf = float(probs2.max(axis=1).mean())
            except ValueError:
                pass
            angle, entropy = _diagnostics(bank, tgt_feats, latent_target_val, classes)
        masr_val = np.nan
        if reference:
            adapted = {c: iou[c] for c in range(net_cfg.num_classes) if np.isfinite(iou[c])}
            try:
                masr_val = masr(adapted, reference).masr
            except ValueError:
                pass
        rows.append({"step": step, "lr": lr, **bundle_values, "val_ce": val_ce,
                     "mean_conf": mean_conf, "target_miou": miou, "masr": masr_val,
                     "proto_angle": angle, "channel_entropy": entropy})
        return val_ce, mean_conf, iou

    def stopping_criterion(val_ce, mean_conf):
        if regime == "adapt" and np.isfinite(mean_conf):
            return val_ce - mean_conf
        return val_ce

    zero_losses = {k: 0.0 for k in ("ce", "clust", "perp", "norm", "em", "total")}
    warm = settings.warm_steps if regime == "adapt" else 0

    for step in range(optim.total_steps):
        sup_idx = int(rng_sup.integers(len(data.images(sup_split))))
        tgt_idx = int(rng_tgt.integers(len(data.images("target_train"))))

        if regime != "adapt" or step < warm:
            image, labels = data.images(sup_split)[sup_idx], data.labels(sup_split)[sup_idx]
            cache = net.forward_cache(image)
            ce_val, d_logits = _ce_grad_full(net, cache, labels, sup_weights)
            grads = net.backward(cache, d_logits, np.zeros_like(cache["feats"]))
            values = dict(zero_losses, ce=ce_val, total=ce_val)
        else:
            values, grads, weights = _adapt_step(
                net, data, sup_idx, tgt_idx, latent_source, bank, weights, pseudo_cfg,
                sup_weights, classes, settings, step)
            if regime == "adapt" and "angle_start" not in diag and bank.initialized.sum() >= 2:
                fmaps = [net.forward(img)[0] for img in data.images("target_val")]
                diag["angle_start"], diag["entropy_start"] = _diagnostics(
                    bank, fmaps, latent_target_val, classes)
                diag["protos_start"] = bank.prototypes.copy()
                diag["init_start"] = bank.initialized.copy()

        if not np.isfinite(values["total"]):
            _dump_diagnostics(outdir, step, values, net)
            raise FloatingPointError(f"non-finite loss at step {step}: {values}")

        sgd_step(net.params, grads, velocity, optim, step)

        is_eval = (step + 1) % settings.eval_every == 0 or step == optim.total_steps - 1
        if is_eval:
            val_ce, mean_conf, iou = evaluate(step + 1, values, optim.lr_at(step))
            crit = stopping_criterion(val_ce, mean_conf)
            if crit < best["criterion"] - 1e-12:
                best.update(criterion=crit, params=net.params.copy(), step=step + 1, stale=0)
            else:
                best["stale"] += 1
                if settings.patience and best["stale"] >= settings.patience:
                    log.info("early stop at step %d (best %d)", step + 1, best["step"])
                    stop = True
        if stop:
            break

    if settings.patience and best["params"] is not None:
        net.params = best["params"]
        final_step = best["step"]
    else:
        final_step = rows[-1]["step"] if rows else optim.total_steps

    # final report on the target validation split
    conf_mat = np.zeros((net_cfg.num_classes + 1, net_cfg.num_classes), dtype=np.int64)
    correct = total_px = 0
    for img, lab in zip(data.images("target_val"), data.labels("target_val")):
        pred = net.predict(img, void)
        conf_mat += confusion_matrix(pred, lab, classes)
        valid = lab.data != void
        correct += int((pred.data[valid] == lab.data[valid]).sum())
        total_px += int(valid.sum())
    iou = iou_from_confusion(conf_mat)
    adapted = {c: iou[c] for c in range(net_cfg.num_classes) if np.isfinite(iou[c])}

    report = ClassReport(
        class_ids=list(range(net_cfg.num_classes)),
        class_names=list(classes.names),
        adapted_iou=iou, miou=mean_iou(iou),
    )
    masr_final = np.nan
    if reference:
        rep = masr(adapted, reference)
        report.supervised_iou = np.array([reference.get(c, np.nan)
                                          for c in range(net_cfg.num_classes)])
        asr = np.full(net_cfg.num_classes, np.nan)
        for i, c in enumerate(rep.class_ids):
            asr[c] = rep.asr[i]
        report.asr = asr
        report.masr = masr_final = rep.masr

    summary = {"regime": regime, "seed": seed, "step": final_step,
               "miou": mean_iou(iou), "pixel_acc": correct / total_px if total_px else np.nan,
               "iou": adapted, "masr": masr_final}
    if regime == "adapt" and "angle_start" in diag:
        both = diag["init_start"] & bank.initialized
        if both.sum() >= 2:
            start_bank = PrototypeBank(net_cfg.num_classes, net_cfg.channels)
            start_bank.prototypes = diag["protos_start"]
            start_bank.initialized = both.copy()
            end_bank = PrototypeBank(net_cfg.num_classes, net_cfg.channels)
            end_bank.prototypes = bank.prototypes
            end_bank.initialized = both.copy()
            summary["angle_start"] = float(np.mean(list(mean_inter_prototype_angle(start_bank).values())))
            summary["angle_end"] = float(np.mean(list(mean_inter_prototype_angle(end_bank).values())))
        fmaps = [net.forward(img)[0] for img in data.images("target_val")]
        _, entropy_end = _diagnostics(bank, fmaps, latent_target_val, classes)
        summary["entropy_start"] = diag["entropy_start"]
        summary["entropy_end"] = entropy_end

    save_checkpoint(os.path.join(outdir, "checkpoint.txt"), net, final_step, seed)
    _write_metrics_csv(os.path.join(outdir, "metrics.csv"), rows)
    report.write_csv(os.path.join(outdir, "report.csv"))
    if settings.log_trajectory and bank.trajectory:
        bank.save_trajectory_csv(os.path.join(outdir, "trajectory.csv"))
    _write_summary(os.path.join(outdir, "summary.csv"), summary)
    return summary


def _adapt_step(net, data, sup_idx, tgt_idx, latent_source, bank, weights, pseudo_cfg,
                sup_weights, classes, settings, step):
    """One full adaptation step; returns (loss values, param grads, updated weights)."""
    s_img = data.images("source_train")[sup_idx]
    s_lab = data.labels("source_train")[sup_idx]
    s_lat = latent_source[sup_idx]
    t_img = data.images("target_train")[tgt_idx]

    s_cache = net.forward_cache(s_img)
    t_cache = net.forward_cache(t_img)
    k = net.cfg.channels
    s_fmap = LatentFeatureMap(s_cache["feats"].reshape(s_cache["h_lat"], s_cache["w_lat"], k))
    t_fmap = LatentFeatureMap(t_cache["feats"].reshape(t_cache["h_lat"], t_cache["w_lat"], k))

    s_sets, _ = gather_class_features([s_fmap], [s_lat], classes, origin="source")
    centroids = {c: batch_centroid(fs) for c, fs in s_sets.items()}
    bank.update(centroids, step=step)

    parts = {}
    ce_val, d_logits_s = _ce_grad_full(net, s_cache, s_lab, sup_weights)
    parts["ce"] = (ce_val, {})

    clust_val, s_clust_grads = clustering_loss(s_sets, bank)
    t_sets = {}
    t_clust_grads = {}
    if bank.initialized.sum() >= 1:
        t_labels, t_centroids, _ = two_pass_detail([t_fmap], bank, pseudo_cfg,
                                                   void_id=classes.void_id)
        t_sets, _ = gather_class_features([t_fmap], t_labels, classes, origin="target")
        t_bank = PrototypeBank(net.cfg.num_classes, k)
        t_bank.update(t_centroids)
        t_val, t_clust_grads = clustering_loss(t_sets, t_bank)
        clust_val += t_val
    parts["clust"] = (clust_val, {})

    perp_val, perp_grads = 0.0, {}
    nonzero = bank.initialized & (np.abs(bank.prototypes).sum(axis=1) > 0)
    if nonzero.sum() >= 2:
        if nonzero.sum() < bank.initialized.sum():
            log.warning("step %d: zero-norm prototype excluded from perpendicularity", step)
            view = PrototypeBank(net.cfg.num_classes, k, eta=settings.eta)
            view.prototypes = bank.prototypes
            view.initialized = nonzero
            perp_val, perp_grads = perpendicularity_loss(view, centroids, settings.eta)
        else:
            perp_val, perp_grads = perpendicularity_loss(bank, centroids, settings.eta)
    parts["perp"] = (perp_val, {})

    norm_val, g_norm_s, g_norm_t, new_target = norm_alignment_loss(
        s_cache["feats"], t_cache["feats"], weights)
    parts["norm"] = (norm_val, {})

    em_val, g_em_full = entropy_min_loss(t_cache["probs_full"])
    parts["em"] = (em_val, {})

    bundle = total_loss(parts, weights)

    d_feats_s = np.zeros_like(s_cache["feats"])
    d_feats_t = np.zeros_like(t_cache["feats"])
    lam = weights
    if lam.lambda_c:
        _scatter_set_grads(d_feats_s, s_sets,
                           {c: lam.lambda_c * g for c, g in s_clust_grads.items()},
                           s_cache["w_lat"])
        _scatter_set_grads(d_feats_t, t_sets,
                           {c: lam.lambda_c * g for c, g in t_clust_grads.items()},
                           t_cache["w_lat"])
    if lam.lambda_p:
        _centroid_grads_to_feats(d_feats_s, s_sets,
                                 {c: lam.lambda_p * g for c, g in perp_grads.items()},
                                 s_cache["w_lat"])
    if lam.lambda_n:
        d_feats_s += lam.lambda_n * g_norm_s
        d_feats_t += lam.lambda_n * g_norm_t

    d_logits_t = net.pool_full_grad(lam.lambda_em * g_em_full, t_cache["h_lat"], t_cache["w_lat"])
    grads = net.backward(s_cache, d_logits_s, d_feats_s)
    grads += net.backward(t_cache, d_logits_t, d_feats_t)

    return bundle.values, grads, weights.with_norm_target(new_target)


def _diagnostics(bank, fmaps, latent_labels, classes):
    angle = entropy = np.nan
    try:
        angles = mean_inter_prototype_angle(bank)
        angle = float(np.mean(list(angles.values())))
    except ValueError:
        pass
    sets, _ = gather_class_features(fmaps, latent_labels, classes, origin="target")
    ents = mean_channel_entropy(sets)
    if ents:
        entropy = float(np.mean(list(ents.values())))
    return angle, entropy


def _write_metrics_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(row.get(col, np.nan)) for col in METRIC_COLUMNS) + "\n")


def _fmt_cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.10g}"


def _write_summary(path, summary: dict) -> None:
    keys = [k for k in summary if k != "iou"]
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(_fmt_cell(summary[k]) if not isinstance(summary[k], str)
                          else summary[k] for k in keys) + "\n")


def _dump_diagnostics(outdir, step, values, net) -> None:
    path = os.path.join(outdir, "failure_dump.txt")
    with open(path, "w") as fh:
        fh.write(f"step {step}\n")
        for k, v in values.items():
            fh.write(f"{k} {v}\n")
        fh.write(f"param_min {np.nanmin(net.params)}\nparam_max {np.nanmax(net.params)}\n")
    log.error("non-finite loss; diagnostics dumped to %s", path)


# ---------------------------------------------------------------------------
# end-to-end gradient-check instance (used by the gradcheck module)


def end_to_end_instance(rng: np.random.Generator, h: float = 1e-5):
    """A frozen-everything-but-params loss over a micro network.

    Stop-gradient quantities (clustering centers, pseudo-labels, the norm
    target) are held at their base-point values, while the perpendicularity
    path through the batch centroids stays live, mirroring training exactly.
    Instances are resampled until every rectifier, filter threshold, L1 kink
    and absolute-value zero sits comfortably away from the evaluation point.
    """
    cfg = NetConfig(window_h=2, window_w=2, hidden=4, channels=4, num_classes=3)
    classes = ClassSet(cfg.num_classes)
    weights = LossWeights(lambda_c=0.3, lambda_p=0.3, lambda_n=0.2, lambda_em=0.3,
                          norm_target=float(rng.uniform(0.8, 1.5)))
    eta = 0.8

    for _ in range(200):
        net = TinySegNet(cfg)
        net.init_params(rng)
        s_img = rng.uniform(0.05, 1.0, size=(4, 4, 3))
        t_img = rng.uniform(0.05, 1.0, size=(4, 4, 3))
        s_full = rng.integers(0, cfg.num_classes, size=(4, 4))
        s_full[rng.random(size=(4, 4)) < 0.15] = classes.void_id
        s_lab = LabelMap(s_full, void_id=classes.void_id)
        s_lat = LabelMap(rng.integers(0, cfg.num_classes, size=(2, 2)), void_id=classes.void_id)
        t_lat = LabelMap(rng.integers(0, cfg.num_classes, size=(2, 2)), void_id=classes.void_id)
        prev = rng.uniform(0.5, 1.5, size=(cfg.num_classes, cfg.channels))
        t_centers = rng.uniform(0.5, 1.5, size=(cfg.num_classes, cfg.channels))
        cw = rng.uniform(0.3, 1.0, size=cfg.num_classes)

        base = _e2e_loss_builder(net, cfg, classes, s_img, t_img, s_lab, s_lat, t_lat,
                                 prev, t_centers, cw, weights, eta)
        fn, margin = base
        if margin(net.params) > 100 * h:
            return fn, net.params.copy()
    raise RuntimeError("could not sample an end-to-end instance away from kinks")


def _e2e_loss_builder(net, cfg, classes, s_img, t_img, s_lab, s_lat, t_lat,
                      prev, t_centers, cw, weights, eta):
    k = cfg.channels

    # frozen clustering centers: smoothed prototypes evaluated at the base point
    def smoothed_at(params):
        probe = TinySegNet(cfg, params.copy())
        sc = probe.forward_cache(s_img)
        fmap = LatentFeatureMap(sc["feats"].reshape(sc["h_lat"], sc["w_lat"], k))
        sets, _ = gather_class_features([fmap], [s_lat], classes)
        bank = PrototypeBank(cfg.num_classes, k, eta=eta)
        bank.prototypes = prev.copy()
        bank.initialized[:] = True
        bank.update({c: batch_centroid(fs) for c, fs in sets.items()})
        return bank.prototypes.copy()

    frozen_clust = smoothed_at(net.params)
    frozen_t_bank = PrototypeBank(cfg.num_classes, k)
    frozen_t_bank.prototypes = t_centers.copy()
    frozen_t_bank.initialized[:] = True
    frozen_clust_bank = PrototypeBank(cfg.num_classes, k)
    frozen_clust_bank.prototypes = frozen_clust
    frozen_clust_bank.initialized[:] = True

    def fn(params):
        probe = TinySegNet(cfg, np.asarray(params, dtype=np.float64).copy())
        sc = probe.forward_cache(s_img)
        tc = probe.forward_cache(t_img)
        s_fmap = LatentFeatureMap(sc["feats"].reshape(sc["h_lat"], sc["w_lat"], k))
        t_fmap = LatentFeatureMap(tc["feats"].reshape(tc["h_lat"], tc["w_lat"], k))
        s_sets, _ = gather_class_features([s_fmap], [s_lat], classes)
        t_sets, _ = gather_class_features([t_fmap], [t_lat], classes, origin="target")
        centroids = {c: batch_centroid(fs) for c, fs in s_sets.items()}
        bank = PrototypeBank(cfg.num_classes, k, eta=eta)
        bank.prototypes = prev.copy()
        bank.initialized[:] = True
        bank.update(centroids)

        ce_val, d_logits_s = _ce_grad_full(probe, sc, s_lab, cw)
        cs_val, cs_grads = clustering_loss(s_sets, frozen_clust_bank)
        ct_val, ct_grads = clustering_loss(t_sets, frozen_t_bank)
        perp_val, perp_grads = perpendicularity_loss(bank, centroids, eta)
        norm_val, gns, gnt, _ = norm_alignment_loss(sc["feats"], tc["feats"], weights)
        em_val, g_em_full = entropy_min_loss(tc["probs_full"])

        total = (ce_val + weights.lambda_c * (cs_val + ct_val) + weights.lambda_p * perp_val
                 + weights.lambda_n * norm_val + weights.lambda_em * em_val)

        dfs = np.zeros_like(sc["feats"])
        dft = np.zeros_like(tc["feats"])
        _scatter_set_grads(dfs, s_sets, {c: weights.lambda_c * g for c, g in cs_grads.items()},
                           sc["w_lat"])
        _scatter_set_grads(dft, t_sets, {c: weights.lambda_c * g for c, g in ct_grads.items()},
                           tc["w_lat"])
        _centroid_grads_to_feats(dfs, s_sets,
                                 {c: weights.lambda_p * g for c, g in perp_grads.items()},
                                 sc["w_lat"])
        dfs += weights.lambda_n * gns
        dft += weights.lambda_n * gnt
        d_logits_t = probe.pool_full_grad(weights.lambda_em * g_em_full, tc["h_lat"], tc["w_lat"])
        grads = probe.backward(sc, d_logits_s, dfs) + probe.backward(tc, d_logits_t, dft)
        return float(total), grads

    def margin(params):
        probe = TinySegNet(cfg, params.copy())
        sc = probe.forward_cache(s_img)
        tc = probe.forward_cache(t_img)
        m = min(np.abs(sc["z1"]).min(), np.abs(sc["z2"]).min(),
                np.abs(tc["z1"]).min(), np.abs(tc["z2"]).min())
        pooled = np.concatenate([sc["feats"], tc["feats"]])
        m = min(m, np.abs(pooled - pooled.mean(axis=1, keepdims=True)).min())
        filt = np.where(pooled >= pooled.mean(axis=1, keepdims=True), pooled, 0.0)
        norms = np.sqrt((filt ** 2).sum(axis=1))
        m = min(m, norms.min())
        m = min(m, np.abs((weights.norm_target + weights.delta_f) - norms).min())
        for latent, cache, centers in ((s_lat, sc, frozen_clust), (t_lat, tc, t_centers)):
            flat = latent.data.ravel()
            for c in range(cfg.num_classes):
                mask = flat == c
                if mask.any():
                    m = min(m, np.abs(cache["feats"][mask] - centers[c][None, :]).min())
        return m

    return fn, margin
