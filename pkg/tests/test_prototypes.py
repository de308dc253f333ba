import numpy as np
import pytest

from lsr.core import ClassSet, LabelMap, LatentFeatureMap, make_rng
from lsr.prototypes import FeatureSet, PrototypeBank, batch_centroid, gather_class_features

VOID = 255


def fmap(arr):
    return LatentFeatureMap(np.asarray(arr, dtype=np.float64))


def test_gather_basic_indexing():
    classes = ClassSet(2)
    fm = fmap([[[1.0, 0.0], [0.0, 2.0]]])          # 1x2xK
    lm = LabelMap(np.array([[0, VOID]]))
    sets, void_set = gather_class_features([fm], [lm], classes)
    assert len(sets[0]) == 1 and 1 not in sets
    assert len(void_set) == 1
    assert (sets[0].vectors[0] == (1.0, 0.0)).all()


def test_gather_empty_batch():
    classes = ClassSet(2)
    sets, void_set = gather_class_features([], [], classes)
    assert sets == {} and len(void_set) == 0


def test_gather_counts_2x2():
    classes = ClassSet(2)
    fm = fmap(make_rng(0).uniform(0, 1, size=(2, 2, 3)))
    lm = LabelMap(np.array([[0, 0], [1, VOID]]))
    sets, void_set = gather_class_features([fm], [lm], classes)
    assert len(sets[0]) == 2 and len(sets[1]) == 1 and len(void_set) == 1


def test_gather_dims_mismatch():
    classes = ClassSet(2)
    fm = fmap(np.zeros((2, 2, 3)))
    lm = LabelMap(np.zeros((2, 3), dtype=int))
    with pytest.raises(ValueError, match="dims"):
        gather_class_features([fm], [lm], classes)


def test_gather_locations_route_back():
    classes = ClassSet(3)
    rng = make_rng(4)
    fm = fmap(rng.uniform(0, 1, size=(3, 4, 2)))
    lm = LabelMap(rng.integers(0, 3, size=(3, 4)))
    sets, _ = gather_class_features([fm], [lm], classes)
    for c, fset in sets.items():
        for vec, (n, h, w) in zip(fset.vectors, fset.locations):
            assert n == 0
            assert (fm.data[h, w] == vec).all()
            assert lm.data[h, w] == c


def test_centroid_examples():
    assert np.allclose(batch_centroid(FeatureSet(0, np.array([[1.0, 0.0], [0.0, 1.0]]))), (0.5, 0.5))
    v = np.array([[2.0, 7.0]])
    assert (batch_centroid(FeatureSet(0, v)) == v[0]).all()
    assert np.allclose(batch_centroid(FeatureSet(0, np.array([[2.0, 2.0], [4.0, 6.0]]))), (3.0, 4.0))


def test_centroid_empty_signals_absence():
    with pytest.raises(ValueError, match="absent"):
        batch_centroid(FeatureSet(1, np.zeros((0, 3))))


def test_smoothing_example():
    bank = PrototypeBank(1, 2, eta=0.8)
    bank.update({0: np.array([1.0, 0.0])})
    bank.update({0: np.array([0.0, 1.0])})
    assert np.allclose(bank.prototypes[0], (0.8, 0.2))


def test_absent_class_unchanged():
    bank = PrototypeBank(2, 2, eta=0.8)
    bank.update({0: np.array([1.0, 1.0]), 1: np.array([2.0, 2.0])})
    bank.update({0: np.array([0.0, 0.0])})
    assert (bank.prototypes[1] == (2.0, 2.0)).all()


def test_first_observation_copies_centroid():
    bank = PrototypeBank(1, 3, eta=0.8)
    v = np.array([0.3, 0.6, 0.9])
    bank.update({0: v})
    assert (bank.prototypes[0] == v).all()
    assert bank.initialized[0]


def test_smoothing_is_convex_combination():
    rng = make_rng(9)
    for _ in range(50):
        prev = rng.uniform(0, 2, size=4)
        cent = rng.uniform(0, 2, size=4)
        bank = PrototypeBank(1, 4, eta=0.8)
        bank.update({0: prev})
        bank.update({0: cent})
        lo, hi = np.minimum(prev, cent), np.maximum(prev, cent)
        assert (bank.prototypes[0] >= lo - 1e-15).all()
        assert (bank.prototypes[0] <= hi + 1e-15).all()
        assert (bank.prototypes[0] >= 0).all()


def test_constant_centroid_is_fixed_point():
    bank = PrototypeBank(1, 2, eta=0.8)
    v = np.array([1.5, 2.5])
    for _ in range(5):
        bank.update({0: v})
    assert np.allclose(bank.prototypes[0], v, atol=0, rtol=0)


def test_eta_bounds():
    with pytest.raises(ValueError):
        PrototypeBank(1, 1, eta=1.5)


def test_trajectory_csv(tmp_path):
    bank = PrototypeBank(2, 2, eta=0.8, log_trajectory=True)
    bank.update({0: np.array([1.0, 2.0])}, step=0)
    bank.update({0: np.array([3.0, 4.0]), 1: np.array([5.0, 6.0])}, step=1)
    path = tmp_path / "traj.csv"
    bank.save_trajectory_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,class_id,p0,p1"
    assert len(lines) == 4
    assert lines[1].startswith("0,0,")
