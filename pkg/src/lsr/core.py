"""Shared domain types, deterministic tensor arithmetic and seeded randomness.

All numeric work is done in float64. Reductions go through numpy, whose
summation order is fixed for a given array layout, so repeated evaluation
on the same data is bit-identical. Random streams use the counter-based
Philox-4x64-10 generator keyed by (seed, stream), which produces the same
sequence on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOID_DEFAULT = 255


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded counter-based generator; (seed, stream) fully determine the output."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ClassSet:
    """The semantic classes of a task plus the reserved void sentinel."""

    num_classes: int
    names: tuple = ()
    void_id: int = VOID_DEFAULT

    def __post_init__(self):
        if self.num_classes <= 0:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if 0 <= self.void_id < self.num_classes:
            raise ValueError(f"void_id {self.void_id} collides with class ids 0..{self.num_classes - 1}")
        names = self.names or tuple(f"class{i}" for i in range(self.num_classes))
        if len(names) != self.num_classes:
            raise ValueError(f"expected {self.num_classes} names, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        object.__setattr__(self, "names", tuple(names))

    def ids(self) -> range:
        return range(self.num_classes)


@dataclass(frozen=True)
class LabelMap:
    """Integer class grid; every cell is a class id or the void sentinel."""

    data: np.ndarray
    void_id: int = VOID_DEFAULT

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError(f"label grid must be 2-D and non-empty, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64)
        arr = np.ascontiguousarray(arr, dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def validate(self, classes: ClassSet) -> "LabelMap":
        ok = (self.data == self.void_id) | ((self.data >= 0) & (self.data < classes.num_classes))
        if not ok.all():
            bad = np.unique(self.data[~ok])
            raise ValueError(f"label map contains ids {bad.tolist()} outside 0..{classes.num_classes - 1} and void {self.void_id}")
        return self


@dataclass(frozen=True)
class LatentFeatureMap:
    """Encoder output: one non-negative K-dim feature vector per latent cell."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be H'xW'xK, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature map contains non-finite values")
        if (arr < 0).any():
            raise ValueError("feature map contains negative entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def h_lat(self) -> int:
        return self.data.shape[0]

    @property
    def w_lat(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def vectors(self) -> np.ndarray:
        """Row-major (H'*W', K) view of the latent vectors."""
        return self.data.reshape(-1, self.data.shape[2])


# ---------------------------------------------------------------------------
# tensor ops


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "add")
    return a + b


def sub(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "mul")
    return a * b


def scale(a, s: float):
    return np.asarray(a, dtype=np.float64) * float(s)


def dot(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    _check_same_shape(a, b, "dot")
    return float(a @ b)


def l1norm(a) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64)).sum())


def l2norm(a) -> float:
    return float(np.sqrt((np.asarray(a, dtype=np.float64) ** 2).sum()))


def softmax(a, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; output rows sum to 1 and lie in (0,1)."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# text serialization: LSRLABEL / LSRFEAT / LSRIMG

LABEL_MAGIC = "LSRLABEL"
FEAT_MAGIC = "LSRFEAT"
IMG_MAGIC = "LSRIMG"


def save_label_map(path, labels: LabelMap) -> None:
    with open(path, "w") as fh:
        fh.write(f"{LABEL_MAGIC}\n{labels.width} {labels.height} {labels.void_id}\n")
        for row in labels.data:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_label_map(path) -> LabelMap:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != LABEL_MAGIC:
            raise ValueError(f"{path}: expected magic {LABEL_MAGIC!r}, got {magic!r}")
        width, height, void_id = (int(tok) for tok in fh.readline().split())
        flat = np.array(fh.read().split(), dtype=np.int64)
    if flat.size != width * height:
        raise ValueError(f"{path}: expected {width * height} ids, got {flat.size}")
    return LabelMap(flat.reshape(height, width), void_id=void_id)


def save_feature_map(path, feats: LatentFeatureMap) -> None:
    with open(path, "w") as fh:
        fh.write(f"{FEAT_MAGIC}\n{feats.h_lat} {feats.w_lat} {feats.channels}\n")
        for vec in feats.vectors():
            fh.write(" ".join(f"{v:.17g}" for v in vec) + "\n")


def load_feature_map(path) -> LatentFeatureMap:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != FEAT_MAGIC:
            raise ValueError(f"{path}: expected magic {FEAT_MAGIC!r}, got {magic!r}")
        h, w, k = (int(tok) for tok in fh.readline().split())
        flat = np.array(fh.read().split(), dtype=np.float64)
    if flat.size != h * w * k:
        raise ValueError(f"{path}: expected {h * w * k} floats, got {flat.size}")
    return LatentFeatureMap(flat.reshape(h, w, k))


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "w") as fh:
        fh.write(f"{IMG_MAGIC}\n{w} {h}\n")
        for px in image.reshape(-1, 3):
            fh.write(f"{px[0]:.17g} {px[1]:.17g} {px[2]:.17g}\n")


def load_image(path) -> np.ndarray:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != IMG_MAGIC:
            raise ValueError(f"{path}: expected magic {IMG_MAGIC!r}, got {magic!r}")
        w, h = (int(tok) for tok in fh.readline().split())
        flat = np.array(fh.read().split(), dtype=np.float64)
    if flat.size != h * w * 3:
        raise ValueError(f"{path}: expected {h * w * 3} floats, got {flat.size}")
    return flat.reshape(h, w, 3)
