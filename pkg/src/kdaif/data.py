"""Synthetic datasets, CSV I/O, label noise and validation shift."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .model import batch_metrics

SCHEMA_VERSION = 1


class LabeledSet(NamedTuple):
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.X.shape[0]


@dataclass
class NoiseSpec:
    rate: float
    seed: int = 0
    mode: str = "uniform_flip"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InputError(f"noise rate must lie in [0, 1), got {self.rate}")
        if self.mode != "uniform_flip":
            raise InputError(f"unknown noise mode {self.mode!r}")


@dataclass
class DatasetBundle:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet
    n_classes: int
    noise_mask: np.ndarray | None = None
    clean_train_y: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.train)
        if self.noise_mask is None:
            self.noise_mask = np.zeros(n, dtype=bool)
        if self.clean_train_y is None:
            self.clean_train_y = self.train.y.copy()
        if self.noise_mask.shape != (n,):
            raise InputError("noise_mask must have one entry per training example")
        if len(self.val) > n / 4:
            raise InputError(f"validation split ({len(self.val)}) must be at most N_train/4 ({n / 4:g})")

    @property
    def dim(self) -> int:
        return self.train.X.shape[1]


def _split_counts(n: int, val_frac: float, test_frac: float) -> tuple[int, int, int]:
    n_test = int(round(test_frac * n))
    n_val = min(int(round(val_frac * n)), (n - n_test) // 5)
    return n - n_test - n_val, n_val, n_test


def _stratified(X, y, n_classes, rng, val_frac, test_frac):
    parts = {"train": [], "val": [], "test": []}
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        n_tr, n_va, _ = _split_counts(idx.size, val_frac, test_frac)
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr : n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va :])
    out = {}
    for name, chunks in parts.items():
        idx = np.concatenate(chunks)
        idx = idx[rng.permutation(idx.size)]
        out[name] = LabeledSet(X[idx], y[idx])
    return out


def gen_blobs(
    classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    val_frac: float = 0.15,
    test_frac: float = 0.25,
) -> DatasetBundle:
    """Unit-variance Gaussian clusters whose closest pair of means is ``separation`` apart."""
    if classes < 2:
        raise InputError("need at least 2 classes")
    if per_class < 4:
        raise InputError("need at least 4 points per class")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dim))
    if separation > 0:
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        min_d = d[np.triu_indices(classes, 1)].min()
        centers *= separation / min_d
    else:
        centers[:] = 0.0
    X = np.concatenate([centers[c] + rng.normal(size=(per_class, dim)) for c in range(classes)])
    y = np.repeat(np.arange(classes), per_class)
    splits = _stratified(X, y, classes, rng, val_frac, test_frac)
    prov = {
        "generator": "blobs",
        "seed": int(seed),
        "classes": int(classes),
        "per_class": int(per_class),
        "dim": int(dim),
        "separation": float(separation),
    }
    return DatasetBundle(splits["train"], splits["val"], splits["test"], classes, provenance=prov)


def gen_two_moons(
    n: int, noise_std: float, seed: int, val_frac: float = 0.15, test_frac: float = 0.25
) -> DatasetBundle:
    """Two interleaving half circles; class sizes differ by at most one."""
    if n < 8:
        raise InputError("need at least 8 points")
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.concatenate([upper, lower])
    if noise_std > 0:
        X = X + rng.normal(scale=noise_std, size=X.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    splits = _stratified(X, y, 2, rng, val_frac, test_frac)
    prov = {"generator": "moons", "seed": int(seed), "n": int(n), "noise_std": float(noise_std)}
    return DatasetBundle(splits["train"], splits["val"], splits["test"], 2, provenance=prov)


def inject_noise(bundle: DatasetBundle, spec: NoiseSpec) -> DatasetBundle:
    """Flip exactly ``round(rate * N_train)`` training labels to a different class.

    Flips are applied to the bundle's clean labels, so re-applying the same
    spec reproduces the same labels and mask.
    """
    K = bundle.n_classes
    if K < 2:
        raise InputError("label flipping needs at least 2 classes")
    n = len(bundle.train)
    clean = bundle.clean_train_y
    n_flip = int(round(spec.rate * n))
    rng = np.random.default_rng(spec.seed)
    idx = np.sort(rng.choice(n, size=n_flip, replace=False))
    y = clean.copy()
    # shift by 1..K-1 picks uniformly among the other classes
    y[idx] = (clean[idx] + rng.integers(1, K, size=n_flip)) % K
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    prov = dict(bundle.provenance)
    prov["noise"] = {"rate": float(spec.rate), "mode": spec.mode, "seed": int(spec.seed), "flipped": n_flip}
    return replace(bundle, train=LabeledSet(bundle.train.X.copy(), y), noise_mask=mask, provenance=prov)


def shift_validation(bundle: DatasetBundle, shift) -> DatasetBundle:
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != (bundle.dim,):
        raise InputError(f"shift has shape {shift.shape}, expected ({bundle.dim},)")
    prov = dict(bundle.provenance)
    prov["val_shift"] = [float(s) for s in shift]
    val = LabeledSet(bundle.val.X + shift, bundle.val.y.copy())
    return replace(bundle, val=val, provenance=prov)


def metrics(spec, params, split: LabeledSet) -> tuple[float, float]:
    """``(accuracy, mean cross-entropy)`` of a model on a split."""
    return batch_metrics(spec, params, split.X, split.y)


def write_csv(path, split: LabeledSet):
    path = Path(path)
    d = split.X.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i + 1}" for i in range(d)] + ["label"])
        for x, y in zip(split.X, split.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def read_csv(path) -> LabeledSet:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise InputError(f"{path}: expected header f1,...,fd,label")
    body = rows[1:]
    d = len(rows[0]) - 1
    try:
        X = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(len(body), d)
        y = np.array([int(r[d]) for r in body], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed row ({exc})") from exc
    if y.size and y.min() < 0:
        raise InputError(f"{path}: labels must be 0-based nonnegative integers")
    return LabeledSet(X, y)


def save_bundle(bundle: DatasetBundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "train.csv", bundle.train)
    write_csv(out / "val.csv", bundle.val)
    write_csv(out / "test.csv", bundle.test)
    with (out / "noise_mask.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "flipped", "clean_label"])
        for i, (m, c) in enumerate(zip(bundle.noise_mask, bundle.clean_train_y)):
            w.writerow([i, int(m), int(c)])
    prov = {"schema_version": SCHEMA_VERSION, "n_classes": bundle.n_classes, **bundle.provenance}
    (out / "provenance.json").write_text(json.dumps(prov, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_bundle(path) -> DatasetBundle:
    src = Path(path)
    if not src.is_dir():
        raise InputError(f"data directory {src} does not exist")
    train = read_csv(src / "train.csv")
    val = read_csv(src / "val.csv")
    test = read_csv(src / "test.csv")
    prov = {}
    if (src / "provenance.json").exists():
        prov = json.loads((src / "provenance.json").read_text(encoding="utf-8"))
    mask = clean = None
    if (src / "noise_mask.csv").exists():
        with (src / "noise_mask.csv").open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        mask = np.array([bool(int(r[1])) for r in rows], dtype=bool)
        clean = np.array([int(r[2]) for r in rows], dtype=np.int64)
    all_y = np.concatenate([train.y, val.y, test.y])
    K = int(prov.pop("n_classes", int(all_y.max()) + 1))
    prov.pop("schema_version", None)
    return DatasetBundle(train, val, test, K, mask, clean, prov)


def bundle_from_csv(path, seed: int, n_classes: int | None = None, val_frac=0.15, test_frac=0.25) -> DatasetBundle:
    """Stratified train/val/test split of a single ``f1..fd,label`` CSV."""
    full = read_csv(path)
    K = int(full.y.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(seed)
    splits = _stratified(full.X, full.y, K, rng, val_frac, test_frac)
    prov = {"generator": "csv", "source": str(path), "seed": int(seed)}
    return DatasetBundle(splits["train"], splits["val"], splits["test"], K, provenance=prov)


def split_labeled(split: LabeledSet, n_labeled: int, n_unlabeled: int, n_classes: int, seed: int):
    """Class-balanced labeled subset plus a feature-only pool from the rest.

    Returns ``(labeled, X_unlabeled)``.
    """
    if n_labeled < n_classes:
        raise InputError("need at least one labeled point per class")
    if n_labeled + n_unlabeled > len(split):
        raise InputError(f"split holds {len(split)} points, asked for {n_labeled + n_unlabeled}")
    rng = np.random.default_rng(seed)
    per = [n_labeled // n_classes + (1 if c < n_labeled % n_classes else 0) for c in range(n_classes)]
    chosen = []
    for c, k in enumerate(per):
        idx = np.flatnonzero(split.y == c)
        if idx.size < k:
            raise InputError(f"class {c} has only {idx.size} points")
        chosen.append(rng.choice(idx, size=k, replace=False))
    lab = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(len(split)), lab)
    unl = rng.choice(rest, size=n_unlabeled, replace=False)
    return LabeledSet(split.X[lab], split.y[lab]), split.X[np.sort(unl)]
