"""Multi-view multi-label datasets: synthetic generation and on-disk format.

On disk a dataset is a directory holding ``manifest.json`` plus payload files.

* Features: one file per view. ``f64le`` files hold raw little-endian float64
  values in row-major ``N x d_v`` order. ``csv`` files hold one
  comma-separated row per sample and are accepted up to 10^6 values.
* Labels and indicators: raw ``uint8`` payloads (``N x C`` and ``N x n``).
* Splits (optional): ``uint8`` per sample, ``0`` train, ``1`` val, ``2`` test.

All shapes come from the manifest. A payload whose byte count disagrees with
them is rejected.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .numcore import Rng

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
CSV_LIMIT = 10**6


@dataclass
class Dataset:
    views: list[np.ndarray]
    indicators: np.ndarray
    labels: np.ndarray
    splits: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def view_dims(self) -> list[int]:
        return [v.shape[1] for v in self.views]

    def validate(self) -> None:
        N = self.n_samples
        if any(v.shape[0] != N for v in self.views) or self.indicators.shape != (N, self.n_views):
            raise ValidationError("view, indicator and label row counts disagree")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValidationError("labels must be 0/1")
        if not np.isin(self.indicators, (0, 1)).all():
            raise ValidationError("indicators must be 0/1")
        if np.any(self.indicators.sum(axis=1) == 0):
            raise ValidationError("every sample must keep at least one observed view")
        if self.splits is not None and (self.splits.shape != (N,) or not np.isin(self.splits, (0, 1, 2)).all()):
            raise ValidationError("splits must be one code in {0,1,2} per sample")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([v[idx] for v in self.views], self.indicators[idx], self.labels[idx],
                       None if self.splits is None else self.splits[idx])

    def with_splits(self, splits) -> "Dataset":
        return replace(self, splits=np.asarray(splits, dtype=np.uint8))


def random_splits(n_samples: int, val: float, test: float, rng: np.random.Generator) -> np.ndarray:
    order = rng.permutation(n_samples)
    n_test, n_val = int(round(test * n_samples)), int(round(val * n_samples))
    splits = np.full(n_samples, TRAIN, dtype=np.uint8)
    splits[order[:n_test]] = TEST
    splits[order[n_test:n_test + n_val]] = VAL
    return splits


# Synthetic data --------------------------------------------------------------

@dataclass
class SyntheticSpec:
    samples: int = 1200
    views: int = 6
    dims: int | list[int] = 16
    classes: int = 12
    labels_per_sample: float = 2.0
    cluster_separation: float = 2.0
    noise: float = 1.0
    seed: int = 0
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    @property
    def view_dims(self) -> list[int]:
        return [int(self.dims)] * self.views if np.isscalar(self.dims) else [int(x) for x in self.dims]


def gen_data(spec: SyntheticSpec) -> Dataset:
    """Gaussian-cluster multi-view data with complete indicators.

    Every class owns one centroid per view, drawn ``N(0, separation^2)`` per
    coordinate. A sample's view features are the mean of its positive classes'
    centroids plus ``N(0, noise^2)`` noise. The label count per sample is
    ``1 + Poisson(labels_per_sample - 1)``, clipped to the class count, so the
    mean label density tracks the target.
    """
    dims = spec.view_dims
    if spec.labels_per_sample < 1 or spec.labels_per_sample > spec.classes:
        raise ValidationError("labels_per_sample must lie in [1, classes]")
    if spec.samples < 1 or spec.views < 1 or len(dims) != spec.views or min(dims) < 1:
        raise ValidationError("need positive samples, views and view dims (one dim per view)")
    if spec.cluster_separation < 0 or spec.noise < 0:
        raise ValidationError("separation and noise must be non-negative")
    root = Rng(spec.seed)
    g = root.stream("data")
    counts = np.clip(1 + g.poisson(spec.labels_per_sample - 1.0, size=spec.samples), 1, spec.classes)
    labels = np.zeros((spec.samples, spec.classes), dtype=np.uint8)
    for i, c in enumerate(counts):
        labels[i, g.choice(spec.classes, size=c, replace=False)] = 1
    weights = labels / labels.sum(axis=1, keepdims=True)
    views = []
    for dv in dims:
        centroids = g.normal(0.0, 1.0, size=(spec.classes, dv)) * spec.cluster_separation
        views.append(weights @ centroids + g.normal(0.0, spec.noise, size=(spec.samples, dv)))
    splits = random_splits(spec.samples, spec.val_fraction, spec.test_fraction, root.stream("split"))
    return Dataset(views, np.ones((spec.samples, spec.views), dtype=np.uint8), labels, splits)


# Disk format -----------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir, feature_format: str = "f64le") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = []
    for v, x in enumerate(ds.views):
        if feature_format == "csv":
            if x.size > CSV_LIMIT:
                raise ValidationError(f"view {v} has {x.size} values; csv payloads are limited to {CSV_LIMIT}")
            name = f"view{v}.csv"
            np.savetxt(out / name, x, delimiter=",", fmt="%.17g")
        else:
            name = f"view{v}.f64"
            (out / name).write_bytes(np.ascontiguousarray(x, dtype="<f8").tobytes())
        feats.append({"path": name, "format": feature_format, "dim": int(x.shape[1])})
    (out / "labels.u8").write_bytes(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())
    (out / "indicators.u8").write_bytes(np.ascontiguousarray(ds.indicators, dtype=np.uint8).tobytes())
    manifest = {
        "n_views": ds.n_views,
        "view_dims": ds.view_dims,
        "n_samples": ds.n_samples,
        "n_classes": ds.n_classes,
        "features": feats,
        "labels": "labels.u8",
        "indicators": "indicators.u8",
    }
    if ds.splits is not None:
        (out / "splits.u8").write_bytes(ds.splits.astype(np.uint8).tobytes())
        manifest["splits"] = "splits.u8"
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_raw(path: Path, dtype, shape) -> np.ndarray:
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise ValidationError(f"{path.name}: {len(raw)} bytes, manifest implies {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    m = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    N, n, C = int(m["n_samples"]), int(m["n_views"]), int(m["n_classes"])
    dims = [int(x) for x in m["view_dims"]]
    if len(dims) != n or len(m["features"]) != n:
        raise ValidationError(f"manifest declares {n} views but lists {len(dims)} dims / {len(m['features'])} files")
    views = []
    for v, (entry, dv) in enumerate(zip(m["features"], dims)):
        path = base / entry["path"]
        if entry.get("format", "f64le") == "csv":
            x = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
            if x.size > CSV_LIMIT:
                raise ValidationError(f"{path.name}: csv payload exceeds {CSV_LIMIT} values")
            if x.shape != (N, dv):
                raise ValidationError(f"{path.name}: csv shape {x.shape} != declared ({N}, {dv})")
        else:
            x = _read_raw(path, "<f8", (N, dv)).astype(np.float64)
        views.append(x)
    labels = _read_raw(base / m["labels"], np.uint8, (N, C))
    indicators = _read_raw(base / m["indicators"], np.uint8, (N, n))
    splits = _read_raw(base / m["splits"], np.uint8, (N,)) if m.get("splits") else None
    ds = Dataset(views, indicators, labels, splits)
    ds.validate()
    return ds
