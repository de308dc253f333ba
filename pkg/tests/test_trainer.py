import os

import numpy as np
import pytest

from lsr import config as cfgmod
from lsr.core import ClassSet, LabelMap, make_rng
from lsr.gradcheck import check, run_loss_check
from lsr.synth import SceneConfig, build_dataset
from lsr.trainer import (Dataset, NetConfig, OptimConfig, TinySegNet, end_to_end_instance,
                         load_checkpoint, run_regime, save_checkpoint, sgd_step)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    """A small, quickly trainable dataset shared by the loop tests."""
    root = tmp_path_factory.mktemp("data")
    cfg = cfgmod.defaults()
    cfg["scene.height"] = cfg["scene.width"] = 32
    cfg["data.train_scenes"] = 6
    cfg["data.val_scenes"] = 2
    scene = cfgmod.scene_config(cfg, seed=0)
    counts = {"source_train": 6, "source_val": 2, "target_train": 6, "target_val": 2}
    build_dataset(scene, counts, root)
    return str(root), cfg


def short_settings(cfg, steps=120, **kw):
    variant = dict(cfg)
    variant["optim.total_steps"] = steps
    variant["train.warm_steps"] = kw.pop("warm", 40)
    variant["train.eval_every"] = kw.pop("eval_every", 60)
    for k, v in kw.items():
        variant[k] = v
    return cfgmod.train_settings(variant)


def test_forward_shapes():
    net = TinySegNet(NetConfig(4, 4, 8, 6, 3))
    net.init_params(make_rng(0))
    image = make_rng(1).uniform(0, 1, size=(16, 20, 3))
    fmap, probs = net.forward(image)
    assert fmap.data.shape == (4, 5, 6)
    assert probs.shape == (16, 20, 3)
    assert np.abs(probs.sum(axis=2) - 1).max() < 1e-12
    assert (fmap.data >= 0).all()


def test_zero_params_give_uniform_probs():
    net = TinySegNet(NetConfig(4, 4, 8, 6, 3))
    image = make_rng(1).uniform(0, 1, size=(8, 8, 3))
    fmap, probs = net.forward(image)
    assert (fmap.data == 0).all()
    assert np.allclose(probs, 1 / 3)


def test_positive_homogeneity_of_final_encoder_layer():
    cfg = NetConfig(2, 2, 4, 5, 3)
    net = TinySegNet(cfg)
    net.init_params(make_rng(3))
    image = make_rng(4).uniform(0.1, 1, size=(6, 6, 3))
    f1, _ = net.forward(image)

    doubled = TinySegNet(cfg, net.params.copy())
    w1, b1, w2, b2, w3, b3 = doubled.views(doubled.params)
    w2 *= 2.0
    b2 *= 2.0
    f2, _ = doubled.forward(image)
    assert np.allclose(f2.data, 2 * f1.data)


def test_window_mismatch_rejected():
    net = TinySegNet(NetConfig(4, 4, 8, 6, 3))
    with pytest.raises(ValueError, match="not divisible"):
        net.forward(np.zeros((10, 8, 3)))


def test_backward_matches_finite_differences():
    rep = run_loss_check("end_to_end", seed=5, instances=3)
    assert rep.passed, rep.line()


def test_backward_zero_upstream_zero_grads():
    net = TinySegNet(NetConfig(2, 2, 4, 4, 3))
    net.init_params(make_rng(5))
    cache = net.forward_cache(make_rng(6).uniform(0, 1, size=(4, 4, 3)))
    grads = net.backward(cache, np.zeros_like(cache["logits"]), np.zeros_like(cache["feats"]))
    assert (grads == 0).all()


def test_lr_schedule():
    cfg = OptimConfig(base_lr=0.1, total_steps=1000)
    assert np.isclose(cfg.lr_at(0), 0.1)
    assert np.isclose(cfg.lr_at(999), 0.1 * (1 / 1000) ** 0.9)
    with pytest.raises(ValueError):
        cfg.lr_at(1000)


def test_sgd_plain_gradient_descent():
    cfg = OptimConfig(base_lr=0.5, momentum=0.0, weight_decay=0.0, total_steps=10)
    params = np.array([1.0, -2.0])
    grads = np.array([0.2, 0.4])
    vel = np.zeros(2)
    sgd_step(params, grads, vel, cfg, 0)
    assert np.allclose(params, [1.0 - 0.5 * 0.2, -2.0 - 0.5 * 0.4])


def test_sgd_weight_decay_term():
    cfg = OptimConfig(base_lr=1.0, momentum=0.0, weight_decay=0.1, total_steps=10)
    params = np.array([2.0])
    vel = np.zeros(1)
    sgd_step(params, np.zeros(1), vel, cfg, 0)
    assert np.allclose(params, 2.0 - 1.0 * 0.1 * 2.0)


def test_sgd_momentum_accumulates():
    cfg = OptimConfig(base_lr=1.0, momentum=0.9, weight_decay=0.0, total_steps=10)
    params = np.zeros(1)
    vel = np.zeros(1)
    sgd_step(params, np.ones(1), vel, cfg, 0)
    sgd_step(params, np.ones(1), vel, cfg, 1)
    assert np.isclose(vel[0], 1.9)


def test_checkpoint_roundtrip(tmp_path):
    net = TinySegNet(NetConfig(2, 2, 4, 4, 3))
    net.init_params(make_rng(8))
    path = tmp_path / "ckpt.txt"
    save_checkpoint(path, net, step=17, seed=4)
    back, step, seed = load_checkpoint(path)
    assert step == 17 and seed == 4
    assert (back.params == net.params).all()
    assert back.cfg == net.cfg


def test_run_regime_writes_artifacts(tmp_path, tiny_data):
    data_dir, cfg = tiny_data
    out = tmp_path / "run"
    summary = run_regime("source", data_dir, short_settings(cfg), 0, str(out))
    assert (out / "checkpoint.txt").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "report.csv").exists()
    assert (out / "summary.csv").exists()
    assert 0.0 <= summary["miou"] <= 1.0


def test_adapt_with_zero_lambdas_equals_source_only(tmp_path, tiny_data):
    data_dir, cfg = tiny_data
    zeroed = dict(cfg)
    for key in ("loss.lambda_c", "loss.lambda_p", "loss.lambda_n", "loss.lambda_em"):
        zeroed[key] = 0.0
    s_adapt = short_settings(zeroed, steps=100, warm=30)
    s_src = short_settings(dict(cfg), steps=100, warm=30)
    run_regime("adapt", data_dir, s_adapt, 3, str(tmp_path / "a"))
    run_regime("source", data_dir, s_src, 3, str(tmp_path / "b"))
    net_a, _, _ = load_checkpoint(tmp_path / "a" / "checkpoint.txt")
    net_b, _, _ = load_checkpoint(tmp_path / "b" / "checkpoint.txt")
    assert (net_a.params == net_b.params).all()


def test_same_seed_bit_identical_metrics(tmp_path, tiny_data):
    data_dir, cfg = tiny_data
    settings = short_settings(cfg)
    run_regime("adapt", data_dir, settings, 7, str(tmp_path / "r1"))
    run_regime("adapt", data_dir, settings, 7, str(tmp_path / "r2"))
    m1 = (tmp_path / "r1" / "metrics.csv").read_bytes()
    m2 = (tmp_path / "r2" / "metrics.csv").read_bytes()
    assert m1 == m2


def test_different_seed_differs(tmp_path, tiny_data):
    data_dir, cfg = tiny_data
    settings = short_settings(cfg)
    run_regime("adapt", data_dir, settings, 1, str(tmp_path / "s1"))
    run_regime("adapt", data_dir, settings, 2, str(tmp_path / "s2"))
    n1, _, _ = load_checkpoint(tmp_path / "s1" / "checkpoint.txt")
    n2, _, _ = load_checkpoint(tmp_path / "s2" / "checkpoint.txt")
    assert not (n1.params == n2.params).all()


def test_early_stopping_restores_best(tmp_path, tiny_data):
    data_dir, cfg = tiny_data
    settings = cfgmod.train_settings({**dict(cfg), "optim.total_steps": 200,
                                      "train.warm_steps": 20, "train.eval_every": 20,
                                      "train.patience": 2})
    summary = run_regime("source", data_dir, settings, 0, str(tmp_path / "es"))
    _, step, _ = load_checkpoint(tmp_path / "es" / "checkpoint.txt")
    assert step == summary["step"]


def test_unknown_regime_rejected(tmp_path, tiny_data):
    data_dir, cfg = tiny_data
    with pytest.raises(ValueError, match="unknown regime"):
        run_regime("finetune", data_dir, short_settings(cfg), 0, str(tmp_path / "x"))


def test_trajectory_logged_when_enabled(tmp_path, tiny_data):
    data_dir, cfg = tiny_data
    variant = dict(cfg)
    variant["proto.log_trajectory"] = True
    settings = short_settings(variant, steps=60, warm=20, eval_every=30)
    run_regime("adapt", data_dir, settings, 0, str(tmp_path / "traj"))
    assert (tmp_path / "traj" / "trajectory.csv").exists()
