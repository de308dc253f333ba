"""Command-line entry point.

Subcommands: gen (dataset), train (one regime), eval (pred vs gt report),
masr (two IoU reports -> adapted-to-supervised score), sweep (perturbation
intensity study), gradcheck (finite-difference validation), embed (feature
export + PCA projection), ablate (loss on/off grid). Every run archives its
resolved configuration inside the output directory; report paths render
matplotlib figures next to the delimited output.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import config as cfgmod
from . import plots
from .core import ClassSet, LabelMap, load_label_map, make_rng
from .decimation import DecimationConfig, class_frequency_weights, decimate
from .gradcheck import SAMPLERS, run_loss_check
from .metrics import ClassReport, confusion_matrix, iou_from_confusion, masr, mean_iou, read_iou_csv
from .prototypes import gather_class_features
from .synth import PERTURBATION_FAMILIES, Perturbation, build_dataset, perturb
from .trainer import Dataset, load_checkpoint, run_regime

ABLATION_CONFIGS = ("full", "no_clust", "no_perp", "no_norm", "no_em")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsr",
        description="Latent-space regularization toolkit: synthetic domain adaptation "
                    "experiments, losses, metrics and diagnostics.",
        epilog="Run 'lsr <subcommand> --help' for per-command flags; "
               "'lsr config' prints the configuration reference.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int, help="override the master seed")

    p = sub.add_parser("config", help="print the configuration reference and defaults")

    p = sub.add_parser("gen", help="generate a paired source/target dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("train", help="train one regime on a generated dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from 'lsr gen'")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--regime", required=True, choices=("target", "source", "adapt"))

    p = sub.add_parser("eval", help="score a predicted label map against ground truth")
    add_common(p)
    p.add_argument("--pred", required=True, help="predicted LSRLABEL file")
    p.add_argument("--gt", required=True, help="ground-truth LSRLABEL file")
    p.add_argument("--out", help="optional run directory for report.csv + figure")

    p = sub.add_parser("masr", help="adapted-to-supervised ratio from two IoU reports")
    p.add_argument("--adapted", required=True, help="adapted report CSV")
    p.add_argument("--supervised", required=True, help="supervised reference report CSV")
    p.add_argument("--restrict", help="comma-separated class ids for the restricted aggregate")
    p.add_argument("--out", help="optional run directory for the full report")

    p = sub.add_parser("sweep", help="perturbation-intensity study (mASR vs level)")
    add_common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (default 3)")

    p = sub.add_parser("gradcheck", help="finite-difference validation of the gradients")
    p.add_argument("--loss", default="all",
                   choices=("all", *SAMPLERS.keys(), "end_to_end"))
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="optional run directory for the report CSV")

    p = sub.add_parser("embed", help="export per-class features and their PCA projection")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint from 'lsr train'")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--split", default="target_val",
                   choices=("source_train", "source_val", "target_train", "target_val"))
    p.add_argument("--per-class", type=int, default=250, dest="per_class",
                   help="max sampled vectors per class (default 250)")

    p = sub.add_parser("ablate", help="loss on/off grid over several seeds")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (default 5)")
    return parser


def _load_config(args) -> dict:
    cfg = cfgmod.parse_config(args.config) if getattr(args, "config", None) else cfgmod.defaults()
    cfg = cfgmod.apply_overrides(cfg, getattr(args, "overrides", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _archive(outdir, cfg) -> None:
    os.makedirs(outdir, exist_ok=True)
    cfgmod.write_config(os.path.join(outdir, "config.txt"), cfg)


def _dataset_counts(cfg) -> dict:
    return {"source_train": cfg["data.train_scenes"], "source_val": cfg["data.val_scenes"],
            "target_train": cfg["data.train_scenes"], "target_val": cfg["data.val_scenes"]}


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    scene = cfgmod.scene_config(cfg)
    _archive(args.out, cfg)
    build_dataset(scene, _dataset_counts(cfg), args.out)
    data = Dataset.from_dir(args.out)
    plots.save_scene_preview(data.images("source_train"), data.labels("source_train"),
                             os.path.join(args.out, "preview_source.png"))
    plots.save_scene_preview(data.images("target_train"), data.labels("target_train"),
                             os.path.join(args.out, "preview_target.png"))
    print(f"dataset written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    settings = cfgmod.train_settings(cfg)
    _archive(args.out, cfg)
    summary = run_regime(args.regime, args.data, settings, cfg["seed"], args.out)
    plots.save_training_curves(os.path.join(args.out, "metrics.csv"),
                               os.path.join(args.out, "curves.png"))
    plots.save_iou_bars(os.path.join(args.out, "report.csv"),
                        os.path.join(args.out, "iou.png"))
    print(f"regime={summary['regime']} seed={summary['seed']} "
          f"step={summary['step']} miou={summary['miou']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    classes = ClassSet(cfg["scene.num_classes"])
    pred = load_label_map(args.pred)
    gt = load_label_map(args.gt)
    iou = iou_from_confusion(confusion_matrix(pred, gt, classes))
    miou = mean_iou(iou)
    report = ClassReport(class_ids=list(range(classes.num_classes)),
                         class_names=list(classes.names), adapted_iou=iou, miou=miou)
    if args.out:
        _archive(args.out, cfg)
        report.write_csv(os.path.join(args.out, "report.csv"))
        plots.save_iou_bars(os.path.join(args.out, "report.csv"),
                            os.path.join(args.out, "iou.png"))
    print(f"mIoU {miou:.4g}")
    return 0


def cmd_masr(args) -> int:
    adapted = read_iou_csv(args.adapted)
    supervised = read_iou_csv(args.supervised)
    restrict = None
    if args.restrict:
        restrict = [int(t) for t in args.restrict.replace(",", " ").split()]
    report = masr(adapted, supervised, restrict=restrict)
    value = report.masr_restricted if restrict else report.masr
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.write_csv(os.path.join(args.out, "masr.csv"))
    print(f"{value:.1f}")
    return 0


def cmd_gradcheck(args) -> int:
    names = ["ce", "clustering", "perpendicularity", "norm", "em", "end_to_end"] \
        if args.loss == "all" else [args.loss]
    reports = [run_loss_check(n, seed=args.seed, instances=args.instances,
                              h=args.h, tol=args.tol) for n in names]
    for rep in reports:
        print(rep.line())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["loss", "max_rel_err", "mean_rel_err", "instances", "tol", "passed"])
            for rep in reports:
                wr.writerow([rep.name, f"{rep.max_rel_err:.6e}", f"{rep.mean_rel_err:.6e}",
                             rep.instances, f"{rep.tol:g}", rep.passed])
    return 0 if all(r.passed for r in reports) else 1


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    settings = cfgmod.train_settings(cfg)
    _archive(args.out, cfg)
    families = (PERTURBATION_FAMILIES if cfg["sweep.families"] == "all"
                else tuple(cfg["sweep.families"].split()))
    levels = [int(t) for t in cfg["sweep.levels"].split()]
    counts = _dataset_counts(cfg)

    rows = []
    for s in range(args.seeds):
        seed = cfg["seed"] + s
        scene = cfgmod.scene_config(cfg, seed=seed)
        data_dir = os.path.join(args.out, f"data_seed{seed}")
        build_dataset(scene, counts, data_dir)
        clean = Dataset.from_dir(data_dir)

        ref_dir = os.path.join(args.out, f"ref_seed{seed}")
        run_regime("target", clean, settings, seed, ref_dir)
        ref_csv = os.path.join(ref_dir, "report.csv")
        reference = read_iou_csv(ref_csv)

        for family in families:
            for level in levels:
                pert = Perturbation(family, level)

                def transform(img, split, i, _p=pert, _seed=seed):
                    fam_idx = PERTURBATION_FAMILIES.index(_p.family)
                    stream = 7_000_000 + fam_idx * 1_000_000 + _p.level * 100_000
                    rng = make_rng(_seed, stream=stream + i + (0 if split == "target_train" else 50_000))
                    return perturb(img, _p, rng)

                run_dir = os.path.join(args.out, f"adapt_{family}_l{level}_seed{seed}")
                shifted = clean.with_target_images(transform)
                summary = run_regime("adapt", shifted, settings, seed, run_dir)
                adapted = read_iou_csv(os.path.join(run_dir, "report.csv"))
                value = masr(adapted, reference).masr
                rows.append({"family": family, "level": level, "seed": seed,
                             "masr": value, "miou": summary["miou"]})
                print(f"family={family} level={level} seed={seed} masr={value:.2f}")

    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["family", "level", "seed", "masr", "miou"])
        wr.writeheader()
        for row in rows:
            wr.writerow({**row, "masr": f"{row['masr']:.10g}", "miou": f"{row['miou']:.10g}"})

    with open(os.path.join(args.out, "plotdata.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["family", "level", "mean_masr"])
        wr.writeheader()
        for family in families:
            for level in levels:
                vals = [r["masr"] for r in rows if r["family"] == family and r["level"] == level]
                wr.writerow({"family": family, "level": level,
                             "mean_masr": f"{np.mean(vals):.10g}"})
    plots.save_sweep_figure(os.path.join(args.out, "plotdata.csv"),
                            os.path.join(args.out, "sweep.png"))
    return 0


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    net, _, _ = load_checkpoint(args.ckpt)
    classes = ClassSet(net.cfg.num_classes)
    data = Dataset.from_dir(args.data)
    _archive(args.out, cfg)

    weights = class_frequency_weights(data.labels("source_train"), classes)
    dec_cfg = DecimationConfig(net.cfg.window_h, net.cfg.window_w, weights,
                               cfg["decim.peak_ratio"])
    fmaps = [net.forward(img)[0] for img in data.images(args.split)]
    latent = [decimate(lm, dec_cfg, classes) for lm in data.labels(args.split)]
    sets, _ = gather_class_features(fmaps, latent, classes)

    rng = make_rng(cfg["seed"], stream=42)
    sampled, ids = [], []
    for c in sorted(sets):
        vecs = sets[c].vectors
        if len(vecs) > args.per_class:
            idx = rng.choice(len(vecs), size=args.per_class, replace=False)
            vecs = vecs[np.sort(idx)]
        sampled.append(vecs)
        ids.append(np.full(len(vecs), c))
    if not sampled:
        raise RuntimeError(f"no labeled latent vector found in split {args.split}")
    x = np.concatenate(sampled)
    cid = np.concatenate(ids)

    basis, eigvals, ratios = pca_top3(x)
    proj = (x - x.mean(axis=0)) @ basis

    with open(os.path.join(args.out, "features.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["class_id"] + [f"f{k}" for k in range(x.shape[1])])
        for c, vec in zip(cid, x):
            wr.writerow([int(c)] + [f"{v:.10g}" for v in vec])
    with open(os.path.join(args.out, "pca.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["class_id", "pc1", "pc2", "pc3"])
        for c, vec in zip(cid, proj):
            wr.writerow([int(c)] + [f"{v:.10g}" for v in vec])
    with open(os.path.join(args.out, "basis.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["component", "eigenvalue", "explained_ratio"]
                    + [f"f{k}" for k in range(x.shape[1])])
        for i in range(3):
            wr.writerow([i, f"{eigvals[i]:.10g}", f"{ratios[i]:.10g}"]
                        + [f"{v:.10g}" for v in basis[:, i]])
    plots.save_embedding_figure(os.path.join(args.out, "pca.csv"),
                                os.path.join(args.out, "embed.png"))
    print(f"exported {x.shape[0]} vectors over {len(sampled)} classes to {args.out}")
    return 0


def pca_top3(x: np.ndarray):
    """Top-3 principal axes via covariance eigendecomposition.

    Signs are fixed so each component's largest-magnitude loading is positive,
    keeping the projection reproducible.
    """
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(x.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:3]
    basis = eigvecs[:, order]
    vals = eigvals[order]
    for i in range(basis.shape[1]):
        j = np.argmax(np.abs(basis[:, i]))
        if basis[j, i] < 0:
            basis[:, i] = -basis[:, i]
    total = eigvals.sum()
    ratios = vals / total if total > 0 else np.zeros_like(vals)
    return basis, vals, ratios


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _archive(args.out, cfg)
    data = Dataset.from_dir(args.data)
    rows = []
    for name in ABLATION_CONFIGS:
        variant = dict(cfg)
        if name != "full":
            variant["loss.lambda_" + name.removeprefix("no_")] = 0.0
        settings = cfgmod.train_settings(variant)
        for s in range(args.seeds):
            seed = cfg["seed"] + s
            run_dir = os.path.join(args.out, f"{name}_seed{seed}")
            summary = run_regime("adapt", data, settings, seed, run_dir)
            rows.append({"config": name, "seed": seed, "miou": summary["miou"]})
            print(f"config={name} seed={seed} miou={summary['miou']:.4f}")

    with open(os.path.join(args.out, "ablate.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["config", "seed", "miou"])
        wr.writeheader()
        for row in rows:
            wr.writerow({**row, "miou": f"{row['miou']:.10g}"})
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["config", "mean_miou", "std_miou"])
        wr.writeheader()
        for name in ABLATION_CONFIGS:
            vals = np.array([r["miou"] for r in rows if r["config"] == name])
            wr.writerow({"config": name, "mean_miou": f"{vals.mean():.10g}",
                         "std_miou": f"{vals.std(ddof=1):.10g}"})
    plots.save_ablation_figure(os.path.join(args.out, "summary.csv"),
                               os.path.join(args.out, "ablate.png"))
    return 0


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "masr": cmd_masr,
    "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "embed": cmd_embed,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "config":
        print(cfgmod.describe())
        return 0
    try:
        return COMMANDS[args.command](args)
    except cfgmod.ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
