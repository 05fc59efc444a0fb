"""Desk-scale datasets, seeded label-noise injection, and bootstrap relabeling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

SYNTHETIC_KINDS = ("moons", "blobs", "spiral")


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Batch:
    """One slice of labeled examples fed to a model."""

    x: np.ndarray  # (n, d) features
    y: np.ndarray  # (n,) integer labels

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A single split of labeled examples. Arrays are read-only after construction.

    `clean_y` keeps the pre-corruption labels when noise or relabeling was
    applied; it is never shown to training code.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str  # train | val | test
    provenance: str
    clean_y: np.ndarray | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(np.asarray(self.x, dtype=np.float64)))
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=np.int64)))
        if self.clean_y is not None:
            object.__setattr__(
                self, "clean_y", _frozen(np.asarray(self.clean_y, dtype=np.int64))
            )
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")

    def __len__(self):
        return self.x.shape[0]

    def batch(self) -> Batch:
        return Batch(self.x, self.y)


@dataclass(frozen=True)
class Splits:
    """Disjoint train/val/test splits of one generated dataset."""

    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class NoiseSpec:
    noise_rate: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"noise_rate {self.noise_rate} outside [0, 1]")


# ---------------------------------------------------------------------------
# synthetic generators


def _gen_moons(n, noise, rng):
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([x0, x1]) + rng.normal(0.0, noise, (n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return x, y, 2


def _gen_blobs(n, noise, rng):
    classes = 3
    angles = np.deg2rad([90.0, 210.0, 330.0])
    centers = 6.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    counts = [n // classes + (1 if i < n % classes else 0) for i in range(classes)]
    xs, ys = [], []
    for c, cnt in enumerate(counts):
        xs.append(centers[c] + rng.normal(0.0, max(noise, 1e-9), (cnt, 2)))
        ys.append(np.full(cnt, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), classes


def _gen_spiral(n, noise, rng):
    n0 = n // 2
    n1 = n - n0
    xs, ys = [], []
    for c, cnt in enumerate([n0, n1]):
        t = rng.uniform(0.25, 1.0, cnt) * 3.0 * np.pi
        r = t / (3.0 * np.pi) * 2.0
        theta = t + c * np.pi
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        xs.append(pts + rng.normal(0.0, noise, (cnt, 2)))
        ys.append(np.full(cnt, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), 2


_GENERATORS = {"moons": _gen_moons, "blobs": _gen_blobs, "spiral": _gen_spiral}


def make_synthetic(kind: str, n: int, noise: float, seed: int) -> Splits:
    """Generate a seeded synthetic dataset with a stratified 80/10/10 split.

    Classes are balanced to within one example overall and per split.
    """
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; pick from {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    x, y, classes = _GENERATORS[kind](n, noise, rng)
    if n < 4 * classes:
        raise ConfigError(f"n={n} too small for {classes} classes")
    provenance = f"{kind}(n={n},noise={noise},seed={seed})"

    # stratified split: slice each class 10/10/80 then shuffle within splits
    parts = {"train": [], "val": [], "test": []}
    for c in range(classes):
        idx = np.flatnonzero(y == c)
        idx = rng.permutation(idx)
        n_c = len(idx)
        n_val = n_c // 10
        n_test = n_c // 10
        parts["val"].append(idx[:n_val])
        parts["test"].append(idx[n_val : n_val + n_test])
        parts["train"].append(idx[n_val + n_test :])
    made = {}
    for split in ("train", "val", "test"):
        idx = rng.permutation(np.concatenate(parts[split]))
        made[split] = Dataset(x[idx], y[idx], classes, split, provenance)
    return Splits(made["train"], made["val"], made["test"])


# ---------------------------------------------------------------------------
# label corruption


def inject_label_noise(ds: Dataset, spec: NoiseSpec):
    """Flip a seeded fraction of training labels to uniformly random other classes.

    Exactly floor(rate * n) labels change; each corrupted label always
    differs from its original. Returns (noisy dataset, boolean flip mask).
    """
    if ds.split != "train":
        raise ConfigError("label noise is only injected into the train split")
    n = len(ds)
    k = int(np.floor(spec.noise_rate * n))
    rng = np.random.default_rng(spec.seed)
    picked = rng.choice(n, size=k, replace=False)
    y = ds.y.copy()
    # uniform over the other classes: draw in [0, C-1) and skip the original
    draws = rng.integers(0, ds.num_classes - 1, size=k)
    y[picked] = draws + (draws >= ds.y[picked])
    mask = np.zeros(n, dtype=bool)
    mask[picked] = True
    clean = ds.clean_y if ds.clean_y is not None else ds.y
    noisy = Dataset(
        ds.x,
        y,
        ds.num_classes,
        ds.split,
        ds.provenance + f"+noise(rate={spec.noise_rate},seed={spec.seed})",
        clean_y=clean,
    )
    return noisy, _frozen(mask)


def bootstrap_relabel(model, params, ds: Dataset) -> Dataset:
    """Replace every training label with the model's predicted class."""
    y = model.predict_labels(params, ds.x)
    clean = ds.clean_y if ds.clean_y is not None else ds.y
    return Dataset(
        ds.x,
        y,
        ds.num_classes,
        ds.split,
        ds.provenance + "+bootstrap",
        clean_y=clean,
    )


# ---------------------------------------------------------------------------
# file formats: CSV (label,feature,...) and IDX (MNIST-family)


def export_csv(ds: Dataset, path):
    """Write `label,f0,f1,...` rows; floats use shortest round-trip repr."""
    path = Path(path)
    lines = []
    for i in range(len(ds)):
        feats = ",".join(repr(float(v)) for v in ds.x[i])
        lines.append(f"{int(ds.y[i])},{feats}")
    path.write_text("\n".join(lines) + "\n")


def _load_csv(path: Path, split: str) -> Dataset:
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
                if width < 2:
                    raise ParseError(path, f"line {lineno}", "need label plus features")
            elif len(cells) != width:
                raise ParseError(
                    path, f"line {lineno}", f"expected {width} columns, got {len(cells)}"
                )
            try:
                label = int(cells[0])
                feats = [float(c) for c in cells[1:]]
            except ValueError as exc:
                raise ParseError(path, f"line {lineno}", str(exc)) from None
            if label < 0:
                raise ParseError(path, f"line {lineno}", "negative label")
            rows.append((label, feats))
    if not rows:
        raise ParseError(path, "line 1", "empty file")
    y = np.array([r[0] for r in rows], dtype=np.int64)
    x = np.array([r[1] for r in rows], dtype=np.float64)
    return Dataset(x, y, int(y.max()) + 1, split, f"csv({path.name})")


def _read_idx(path: Path):
    blob = path.read_bytes()
    if len(blob) < 4:
        raise ParseError(path, len(blob), "truncated IDX header")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", blob[:4])
    if zero1 != 0 or zero2 != 0:
        raise ParseError(path, 0, "bad IDX magic")
    if dtype_code != 0x08:
        raise ParseError(path, 2, f"unsupported IDX dtype 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise ParseError(path, len(blob), "truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    count = int(np.prod(dims)) if dims else 0
    if len(blob) != header_len + count:
        raise ParseError(
            path, len(blob), f"expected {header_len + count} bytes for dims {dims}"
        )
    data = np.frombuffer(blob, dtype=np.uint8, offset=header_len)
    return data.reshape(dims)


def _load_idx(path: Path, labels_path, split: str) -> Dataset:
    if labels_path is None:
        guess = Path(str(path).replace("images", "labels").replace("idx3", "idx1"))
        if guess == path or not guess.exists():
            raise ConfigError(
                f"cannot infer labels file for {path}; pass labels_path explicitly"
            )
        labels_path = guess
    labels_path = Path(labels_path)
    images = _read_idx(path)
    labels = _read_idx(labels_path)
    if labels.ndim != 1:
        raise ParseError(labels_path, 4, "labels IDX must be 1-dimensional")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(path, 4, "image/label counts differ")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return Dataset(
        x, y, int(y.max()) + 1, split, f"idx({path.name},{labels_path.name})"
    )


def load_idx_or_csv(path, labels_path=None, split: str = "train") -> Dataset:
    """Load a dataset from CSV (`label,f0,f1,...`) or IDX byte format.

    IDX features are byte-valued and scaled to [0,1]; CSV features are
    stored as floats and loaded verbatim. For IDX, `labels_path` names the
    companion labels file (inferred from the images filename when omitted).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such dataset file: {path}")
    if path.suffix.lower() == ".csv":
        return _load_csv(path, split)
    return _load_idx(path, labels_path, split)
