"""Datasets: synthetic blobs, CSV ingestion and exchangeable train/cal/test splits."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import atomic_write_text
from .seeding import substream

DEFAULT_BOX = (0.0, 1.0)
LABEL_COLUMN = "label"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    box: tuple[float, float] | None = DEFAULT_BOX
    classes: tuple[str, ...] = ()
    feature_names: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)
    indices: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DataError(f"X of shape {X.shape} does not match {y.size} labels")
        if not np.all(np.isfinite(X)):
            raise DataError("features must be finite")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.box is not None and X.size:
            lo, hi = self.box
            outside = np.flatnonzero(((X < lo) | (X > hi)).any(axis=1))
            if outside.size:
                raise DataError(f"row {int(outside[0])} lies outside the box [{lo}, {hi}]")
        classes = tuple(self.classes) or tuple(str(k) for k in range(self.num_classes))
        if len(classes) != self.num_classes:
            raise DataError(f"{len(classes)} class names for K={self.num_classes}")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for d={X.shape[1]}")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "feature_names", names)
        if self.indices is not None:
            object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, tag: str | None = None) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        prov = dict(self.provenance)
        if tag:
            prov["part"] = tag
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.box, self.classes,
                       self.feature_names, prov, base[idx])

    def with_features(self, X, **provenance) -> Dataset:
        """Same labels and metadata, new feature matrix (e.g. after an attack)."""
        prov = {**self.provenance, **provenance}
        return Dataset(X, self.y, self.num_classes, self.box, self.classes,
                       self.feature_names, prov, self.indices)

    def equals(self, other: Dataset) -> bool:
        return (np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y)
                and self.num_classes == other.num_classes and self.box == other.box
                and self.classes == other.classes and self.feature_names == other.feature_names)


# -- synthetic data -----------------------------------------------------------

def gen_blobs(num_classes: int, dim: int, n_per_class: int, spread: float,
              box: tuple[float, float] | None = DEFAULT_BOX, seed: int = 0,
              max_tries: int = 1000) -> Dataset:
    """Balanced Gaussian blobs with isotropic std ``spread``, clipped to the box.

    Class means are drawn uniformly in the box (``[0, 1]`` when unboxed) and
    kept only if at least ``2 * spread`` from every earlier mean.
    """
    if num_classes < 2:
        raise DataError("num_classes must be >= 2")
    if dim < 1:
        raise DataError("dim must be >= 1")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1; the dataset would be empty")
    if not (spread > 0 and math.isfinite(spread)):
        raise DataError(f"spread must be a positive finite number, got {spread}")
    lo, hi = box if box is not None else DEFAULT_BOX
    rng = substream(seed, "data")

    means: list[np.ndarray] = []
    for k in range(num_classes):
        for _ in range(max_tries):
            cand = rng.uniform(lo, hi, size=dim)
            if all(np.linalg.norm(cand - m) >= 2 * spread for m in means):
                means.append(cand)
                break
        else:
            raise DataError(f"could not place {num_classes} class means {2 * spread:g} apart "
                            f"after {max_tries} tries; try a smaller spread")

    X = np.concatenate([m + spread * rng.standard_normal((n_per_class, dim)) for m in means])
    if box is not None:
        X = np.clip(X, lo, hi)
    y = np.repeat(np.arange(num_classes), n_per_class)
    order = rng.permutation(len(y))
    prov = {"source": "gen_blobs", "seed": int(seed), "spread": float(spread),
            "n_per_class": int(n_per_class)}
    return Dataset(X[order], y[order], num_classes, box, provenance=prov)


# -- CSV ----------------------------------------------------------------------

def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def dataset_to_csv_text(ds: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*ds.feature_names, LABEL_COLUMN])
    for row, label in zip(ds.X, ds.y):
        writer.writerow([repr(float(v)) for v in row] + [ds.classes[label]])
    return buf.getvalue()


def write_csv(ds: Dataset, path) -> None:
    """Write the CSV plus a JSON sidecar holding K, box, class order and provenance."""
    meta = {
        "num_classes": ds.num_classes,
        "classes": list(ds.classes),
        "box": list(ds.box) if ds.box is not None else None,
        "dim": ds.dim,
        "n": len(ds),
        "provenance": ds.provenance,
    }
    atomic_write_text(path, dataset_to_csv_text(ds))
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_csv(path, label_column: str = LABEL_COLUMN, feature_columns: Sequence[str] | None = None,
             classes: Sequence[str] | None = None, num_classes: int | None = None,
             box: tuple[float, float] | None | str = "sidecar", normalize=None,
             use_sidecar: bool = True) -> Dataset:
    """Read a labelled CSV into a Dataset.

    Labels map to 0..K-1 by first appearance unless ``classes`` fixes the
    order; a sidecar written by ``write_csv`` supplies classes, K and box.
    ``normalize`` is either ``"minmax"`` (per column) or a ``(lo, hi)`` source
    range; features are mapped linearly onto the box.
    """
    path = Path(path)
    meta = {}
    if use_sidecar and sidecar_path(path).exists():
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    if classes is None and meta.get("classes"):
        classes = meta["classes"]
    if num_classes is None and meta.get("num_classes"):
        num_classes = int(meta["num_classes"])
    if box == "sidecar":
        box = tuple(meta["box"]) if meta.get("box") is not None else (DEFAULT_BOX if not meta else None)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: unknown label column {label_column!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise DataError(f"{path}: unknown column(s) {missing}")
        fidx = [header.index(c) for c in feature_columns]
        lidx = header.index(label_column)

        mapping = {name: i for i, name in enumerate(classes)} if classes is not None else {}
        fixed = classes is not None
        rows, labels = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}")
            try:
                values = [float(record[j]) for j in fidx]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{lineno}: non-finite feature value")
            label = record[lidx].strip()
            if label not in mapping:
                if fixed:
                    raise DataError(f"{path}:{lineno}: unknown class label {label!r}")
                mapping[label] = len(mapping)
            rows.append(values)
            labels.append(mapping[label])

    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(fidx))
    names = list(mapping) if not fixed else list(classes)
    K = num_classes if num_classes is not None else max(len(names), 2)
    if K < len(names):
        raise DataError(f"{path}: found {len(names)} classes but num_classes={K}")
    names += [f"class{k}" for k in range(len(names), K)]

    if normalize is not None and len(X):
        lo_t, hi_t = box if box is not None else DEFAULT_BOX
        if normalize == "minmax":
            src_lo, src_hi = X.min(axis=0), X.max(axis=0)
        else:
            src_lo, src_hi = (np.full(X.shape[1], float(v)) for v in normalize)
        width = np.where(src_hi > src_lo, src_hi - src_lo, 1.0)
        X = lo_t + (X - src_lo) / width * (hi_t - lo_t)

    if box is not None and len(X):
        outside = np.flatnonzero(((X < box[0]) | (X > box[1])).any(axis=1))
        if outside.size:
            raise DataError(f"{path}:{int(outside[0]) + 2}: features outside the box {list(box)}")

    prov = dict(meta.get("provenance", {}))
    prov.update({"file": path.name, "label_mapping": {n: i for i, n in enumerate(names)}})
    return Dataset(X, labels, K, box, tuple(names), tuple(feature_columns), prov)


# -- splits -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.5
    cal: float = 0.25
    test: float = 0.25
    seed: int = 0
    require_eval: bool = True

    def __post_init__(self):
        parts = (self.train, self.cal, self.test)
        if any(p < 0 for p in parts):
            raise DataError("split fractions must be nonnegative")
        if abs(sum(parts) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(parts)}")

    def sizes(self, n: int) -> tuple[int, int, int]:
        """Largest-remainder allocation of ``n`` rows."""
        raw = [f * n for f in (self.train, self.cal, self.test)]
        counts = [math.floor(v + 1e-9) for v in raw]
        order = sorted(range(3), key=lambda i: -(raw[i] - counts[i]))
        for i in order[: n - sum(counts)]:
            counts[i] += 1
        return tuple(counts)


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """One seeded permutation cut into train/cal/test, so cal and test are exchangeable."""
    n_train, n_cal, n_test = spec.sizes(len(ds))
    if spec.require_eval and (n_cal == 0 or n_test == 0):
        raise DataError(f"split leaves an empty calibration or test part ({n_cal}, {n_test})")
    perm = substream(spec.seed, "split").permutation(len(ds))
    parts = np.split(perm, [n_train, n_train + n_cal])
    return tuple(ds.subset(p, tag) for p, tag in zip(parts, ("train", "cal", "test")))
