import csv
import os

import numpy as np
import pytest

from lsr.cli import main, pca_top3
from lsr.core import LabelMap, make_rng, save_label_map

SMALL = ["--set", "scene.height=32", "--set", "scene.width=32",
         "--set", "data.train_scenes=6", "--set", "data.val_scenes=2",
         "--set", "optim.total_steps=120", "--set", "train.warm_steps=40",
         "--set", "train.eval_every=60"]

# Table I golden rows for the masr subcommand
TARGET_ONLY = [96.5, 73.8, 88.4, 42.2, 43.7, 40.7, 46.1, 58.6, 88.5, 54.9, 91.9,
               68.7, 46.2, 90.7, 68.8, 69.9, 48.8, 47.6, 64.5]
ADAPTED_GTAV = [88.9, 26.6, 82.0, 21.0, 24.4, 30.1, 41.1, 27.0, 84.7, 42.7, 80.1,
                63.0, 26.4, 83.1, 30.4, 44.3, 16.8, 35.8, 42.4]


def write_iou_csv(path, values):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["class_id", "class_name", "iou", "supervised_iou", "asr"])
        for c, v in enumerate(values):
            wr.writerow([c, f"class{c}", v, "", ""])
        wr.writerow([-1, "mean", np.mean(values), "", ""])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["gen", "--out", str(out)] + SMALL) == 0
    return str(out)


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = main(["train", "--data", dataset, "--out", str(out), "--regime", "adapt"] + SMALL)
    assert code == 0
    return str(out)


def test_gen_writes_dataset_and_figures(dataset):
    for split in ("source_train", "source_val", "target_train", "target_val"):
        assert os.path.exists(os.path.join(dataset, f"{split}.txt"))
    assert os.path.exists(os.path.join(dataset, "config.txt"))
    assert os.path.exists(os.path.join(dataset, "preview_source.png"))
    assert os.path.exists(os.path.join(dataset, "preview_target.png"))


def test_train_writes_run_artifacts(trained):
    for name in ("checkpoint.txt", "metrics.csv", "report.csv", "config.txt",
                 "curves.png", "iou.png"):
        assert os.path.exists(os.path.join(trained, name)), name


def test_eval_identity_prints_miou_one(tmp_path, capsys):
    lm = LabelMap(make_rng(0).integers(0, 5, size=(8, 8)))
    path = tmp_path / "x.lab"
    save_label_map(path, lm)
    assert main(["eval", "--pred", str(path), "--gt", str(path)]) == 0
    out = capsys.readouterr().out
    assert "mIoU 1" in out


def test_eval_with_report(tmp_path, capsys):
    lm = LabelMap(make_rng(0).integers(0, 5, size=(8, 8)))
    pred = LabelMap(make_rng(1).integers(0, 5, size=(8, 8)))
    save_label_map(tmp_path / "gt.lab", lm)
    save_label_map(tmp_path / "pred.lab", pred)
    out = tmp_path / "run"
    assert main(["eval", "--pred", str(tmp_path / "pred.lab"),
                 "--gt", str(tmp_path / "gt.lab"), "--out", str(out)]) == 0
    assert (out / "report.csv").exists()
    assert (out / "iou.png").exists()


def test_masr_prints_golden(tmp_path, capsys):
    write_iou_csv(tmp_path / "a.csv", ADAPTED_GTAV)
    write_iou_csv(tmp_path / "s.csv", TARGET_ONLY)
    assert main(["masr", "--adapted", str(tmp_path / "a.csv"),
                 "--supervised", str(tmp_path / "s.csv")]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed == "69.5"


def test_gradcheck_subcommand(tmp_path, capsys):
    code = main(["gradcheck", "--loss", "em", "--instances", "5",
                 "--out", str(tmp_path / "gc")])
    assert code == 0
    out = capsys.readouterr().out
    assert "PASS em" in out
    assert (tmp_path / "gc" / "gradcheck.csv").exists()


def test_embed_exports_pca(dataset, trained, tmp_path, capsys):
    out = tmp_path / "embed"
    code = main(["embed", "--data", dataset, "--ckpt",
                 os.path.join(trained, "checkpoint.txt"), "--out", str(out)] + SMALL)
    assert code == 0
    for name in ("features.csv", "pca.csv", "basis.csv", "embed.png", "config.txt"):
        assert (out / name).exists(), name
    with open(out / "basis.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ratios = [float(r["explained_ratio"]) for r in rows]
    assert all(a >= b - 1e-15 for a, b in zip(ratios, ratios[1:]))


def test_pca_orthonormal_basis():
    rng = make_rng(3)
    x = rng.normal(size=(200, 10)) @ rng.normal(size=(10, 10))
    basis, vals, ratios = pca_top3(np.abs(x))
    gram = basis.T @ basis
    assert np.abs(gram - np.eye(3)).max() <= 1e-10
    assert vals[0] >= vals[1] >= vals[2]


def test_embed_respects_per_class_cap(dataset, trained, tmp_path):
    out = tmp_path / "embed_cap"
    main(["embed", "--data", dataset, "--ckpt", os.path.join(trained, "checkpoint.txt"),
          "--out", str(out), "--per-class", "10"] + SMALL)
    with open(out / "features.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    counts = {}
    for r in rows:
        counts[r["class_id"]] = counts.get(r["class_id"], 0) + 1
    assert max(counts.values()) <= 10


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--regime", "nope", "--data", "x", "--out", "y"])
    assert exc.value.code == 2


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("what = 1\n")
    code = main(["gen", "--out", str(tmp_path / "d"), "--config", str(bad)])
    assert code == 2
    assert "line 1" in capsys.readouterr().err


def test_missing_file_exit_code(capsys):
    code = main(["eval", "--pred", "/nonexistent.lab", "--gt", "/nonexistent.lab"])
    assert code == 1


def test_config_subcommand_prints_reference(capsys):
    assert main(["config"]) == 0
    out = capsys.readouterr().out
    assert "pseudo.tau" in out and "optim.base_lr" in out


def test_determinism_of_cli_outputs(dataset, tmp_path):
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    args = ["train", "--data", dataset, "--regime", "source", "--seed", "3"] + SMALL
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    for name in ("metrics.csv", "report.csv", "summary.csv", "checkpoint.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
