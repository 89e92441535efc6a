"""Synthetic benchmarks for domain-shift and few-label regimes, plus CSV io.

Both generators place Gaussian class clusters on a circle in the first two
input dimensions; the remaining dimensions carry pure noise. The domain-shift
generator produces a target domain by rotating that circle and translating
the whole cloud, a controllable difficulty knob.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

DOMAINS = ("source", "target", "pool", "eval")


@dataclass
class DataBundle:
    """Labeled set, unlabeled set, held-out eval set, and an optional larger
    labeled pool for teacher pretraining."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    pool_x: np.ndarray | None = None
    pool_y: np.ndarray | None = None
    pool_domain: np.ndarray | None = None  # per-row "source"/"target" tag, if known
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.labeled_x.shape[1]

    @property
    def classes(self) -> int:
        return int(self.meta.get("classes", self.labeled_y.max() + 1))


def _class_means(classes: int, dim: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _sample_clusters(rng: np.random.Generator, means: np.ndarray, per_class: int,
                     noise: float) -> tuple[np.ndarray, np.ndarray]:
    classes, dim = means.shape
    x = np.repeat(means, per_class, axis=0) + rng.normal(0.0, noise, (classes * per_class, dim))
    y = np.repeat(np.arange(classes), per_class)
    return x, y


def _shift(x: np.ndarray, rotation_deg: float, translation: float) -> np.ndarray:
    """Rigid transform of the cloud: rotate the class plane (dims 0, 1), then
    translate along the first non-class dimension (dim 2, or dim 0 when the
    input is 2-D). The rotation corrupts class geometry; the translation is a
    pure covariate shift that leaves class information intact."""
    out = x.copy()
    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    out[:, :2] = out[:, :2] @ rot.T
    out[:, 2 if out.shape[1] > 2 else 0] += translation
    return out


def _standardize(parts: list[np.ndarray],
                 extra: list[np.ndarray] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Z-score every partition with per-dimension statistics computed over
    `parts` only; `extra` partitions (e.g. the teacher pool, whose size is a
    teacher knob and must not perturb the benchmark) are transformed with the
    same statistics."""
    stacked = np.concatenate(parts, axis=0)
    mu = stacked.mean(axis=0)
    sd = stacked.std(axis=0)
    sd[sd == 0.0] = 1.0
    for p in (*parts, *extra):
        p -= mu
        p /= sd
    return mu, sd


def _add_style(rng: np.random.Generator, parts: list[np.ndarray], dim: int,
               style_dims: int, style_scale: float,
               shifts: list[float] | None = None) -> None:
    """Nuisance structure: every sample gets latent style coordinates embedded
    into the non-class dimensions along fixed random directions. Class
    information (dims 0, 1) is untouched; the style subspace dominates input
    variance the way appearance factors dominate real images. A per-part
    shift moves that part's style distribution, giving domains distinct
    styles."""
    if style_dims < 1 or style_scale == 0.0 or dim <= 2:
        return
    v = rng.normal(size=(style_dims, dim - 2))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    shifts = shifts if shifts is not None else [0.0] * len(parts)
    for p, shift in zip(parts, shifts):
        coords = rng.normal(size=(len(p), style_dims)) + shift / np.sqrt(style_dims)
        p[:, 2:] += style_scale * (coords @ v)


def gen_uda_benchmark(classes: int = 8, dim: int = 16, per_class: int = 40,
                      unlabeled_per_class: int = 80, eval_per_class: int = 100,
                      rotation_deg: float = 22.0, translation: float = 8.0,
                      noise: float = 0.6, target_noise: float | None = None,
                      radius: float = 3.0, pool_per_class: int = 100,
                      style_dims: int = 4, style_scale: float = 2.0,
                      style_shift: float = 3.0, seed: int = 0) -> DataBundle:
    """Labeled source domain, unlabeled shifted target domain, target eval set,
    and a labeled pool covering both domains for teacher pretraining."""
    if classes < 2 or dim < 2:
        raise ValueError(f"need classes >= 2 and dim >= 2, got ({classes}, {dim})")
    if min(per_class, unlabeled_per_class, eval_per_class, pool_per_class) < 1:
        raise ValueError("all per-class counts must be >= 1")
    rng = np.random.default_rng(seed)
    t_noise = noise if target_noise is None else target_noise
    means = _class_means(classes, dim, radius)

    labeled_x, labeled_y = _sample_clusters(rng, means, per_class, noise)
    unl_x, _ = _sample_clusters(rng, means, unlabeled_per_class, t_noise)
    unl_x = _shift(unl_x, rotation_deg, translation)
    eval_x, eval_y = _sample_clusters(rng, means, eval_per_class, t_noise)
    eval_x = _shift(eval_x, rotation_deg, translation)

    pool_src_x, pool_src_y = _sample_clusters(rng, means, pool_per_class, noise)
    pool_tgt_x, pool_tgt_y = _sample_clusters(rng, means, pool_per_class, t_noise)
    pool_tgt_x = _shift(pool_tgt_x, rotation_deg, translation)
    _add_style(rng, [labeled_x, unl_x, eval_x, pool_src_x, pool_tgt_x],
               dim, style_dims, style_scale,
               shifts=[0.0, style_shift, style_shift, 0.0, style_shift])
    pool_x = np.concatenate([pool_src_x, pool_tgt_x])
    pool_y = np.concatenate([pool_src_y, pool_tgt_y])
    pool_domain = np.array(["source"] * len(pool_src_x) + ["target"] * len(pool_tgt_x))

    mu, sd = _standardize([labeled_x, unl_x, eval_x], extra=[pool_x])
    meta = {"kind": "uda", "classes": classes, "dim": dim, "seed": seed,
            "radius": radius, "rotation_deg": rotation_deg, "translation": translation,
            "noise": noise, "target_noise": t_noise, "style_dims": style_dims,
            "style_scale": style_scale, "style_shift": style_shift,
            "feature_mean": mu, "feature_std": sd}
    return DataBundle(labeled_x, labeled_y, unl_x, eval_x, eval_y,
                      pool_x, pool_y, pool_domain, meta)


def gen_ssl_benchmark(classes: int = 10, dim: int = 16, labels_per_class: int = 4,
                      unlabeled_count: int = 600, eval_count: int = 500,
                      noise: float = 0.5, radius: float = 3.0,
                      pool_per_class: int = 100, style_dims: int = 4,
                      style_scale: float = 2.0, seed: int = 0) -> DataBundle:
    """Single domain: a small stratified labeled subset, a large unlabeled set,
    and a held-out eval set, split from one master sample by index."""
    if labels_per_class < 1:
        raise ValueError(f"labels_per_class must be >= 1, got {labels_per_class}")
    if classes < 2 or dim < 2:
        raise ValueError(f"need classes >= 2 and dim >= 2, got ({classes}, {dim})")
    rng = np.random.default_rng(seed)
    means = _class_means(classes, dim, radius)

    # master sample, one stratified block per class, split by index bookkeeping
    per_class = labels_per_class + (unlabeled_count + eval_count + classes - 1) // classes
    master_x, master_y = _sample_clusters(rng, means, per_class, noise)
    labeled_idx, rest_idx = [], []
    for c in range(classes):
        block = np.flatnonzero(master_y == c)
        labeled_idx.extend(block[:labels_per_class])
        rest_idx.extend(block[labels_per_class:])
    rest = rng.permutation(np.array(rest_idx))
    unl_idx = rest[:unlabeled_count]
    eval_idx = rest[unlabeled_count:unlabeled_count + eval_count]
    labeled_idx = np.array(labeled_idx)

    pool_x, pool_y = _sample_clusters(rng, means, pool_per_class, noise)
    _add_style(rng, [master_x, pool_x], dim, style_dims, style_scale)
    mu, sd = _standardize([master_x], extra=[pool_x])
    meta = {"kind": "ssl", "classes": classes, "dim": dim, "seed": seed,
            "radius": radius, "noise": noise, "feature_mean": mu, "feature_std": sd,
            "labeled_idx": labeled_idx, "unlabeled_idx": unl_idx, "eval_idx": eval_idx}
    return DataBundle(master_x[labeled_idx], master_y[labeled_idx], master_x[unl_idx],
                      master_x[eval_idx], master_y[eval_idx],
                      pool_x, pool_y, np.array(["source"] * len(pool_x)), meta)


def save_csv(bundle: DataBundle, path) -> None:
    """Write the bundle as feature columns, a label column (-1 for unlabeled),
    and a domain column; floats carry 17 significant digits."""
    dim = bundle.dim
    header = [f"feature_{i}" for i in range(dim)] + ["label", "domain"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)

        def rows(x, y, domain):
            for i in range(len(x)):
                label = -1 if y is None else int(y[i])
                writer.writerow([f"{v:.17g}" for v in x[i]] + [label, domain])

        rows(bundle.labeled_x, bundle.labeled_y, "source")
        rows(bundle.unlabeled_x, None,
             "target" if bundle.meta.get("kind") == "uda" else "source")
        rows(bundle.eval_x, bundle.eval_y, "eval")
        if bundle.pool_x is not None:
            rows(bundle.pool_x, bundle.pool_y, "pool")


def load_csv(path) -> DataBundle:
    """Parse a benchmark CSV back into a bundle; label -1 routes a row to the
    unlabeled set, the domain column routes eval and pool rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        dim = len(header) - 2
        expected = [f"feature_{i}" for i in range(dim)] + ["label", "domain"]
        if dim < 1 or header != expected:
            raise ValueError(f"{path}: schema error, header {header!r} does not match "
                             f"the feature_*/label/domain layout")
        parts: dict[str, list] = {"labeled": [], "unlabeled": [], "eval": [], "pool": []}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise ValueError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(row)}")
            try:
                x = [float(v) for v in row[:dim]]
                label = int(row[dim])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed value ({exc})") from None
            domain = row[dim + 1]
            if domain not in DOMAINS:
                raise ValueError(f"{path}:{lineno}: unknown domain {domain!r}")
            if label < -1:
                raise ValueError(f"{path}:{lineno}: label must be >= -1, got {label}")
            if label == -1:
                parts["unlabeled"].append(x)
            elif domain == "eval":
                parts["eval"].append((x, label))
            elif domain == "pool":
                parts["pool"].append((x, label))
            else:
                parts["labeled"].append((x, label))

    def split(pairs):
        if not pairs:
            return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
        xs, ys = zip(*pairs)
        return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)

    labeled_x, labeled_y = split(parts["labeled"])
    eval_x, eval_y = split(parts["eval"])
    pool_x, pool_y = split(parts["pool"])
    unlabeled_x = (np.asarray(parts["unlabeled"], dtype=np.float64)
                   if parts["unlabeled"] else np.zeros((0, dim)))
    classes = int(max(labeled_y.max(initial=-1), eval_y.max(initial=-1),
                      pool_y.max(initial=-1))) + 1
    meta = {"kind": "csv", "classes": max(classes, 2), "dim": dim, "path": str(path)}
    has_pool = len(pool_x) > 0
    return DataBundle(labeled_x, labeled_y, unlabeled_x, eval_x, eval_y,
                      pool_x if has_pool else None, pool_y if has_pool else None,
                      None, meta)


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled pass of index batches; a lone trailing sample is folded
    into the previous batch so batch-norm never sees a batch of one."""
    if n < 1 or batch_size < 1:
        raise ValueError(f"need n >= 1 and batch_size >= 1, got ({n}, {batch_size})")
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def paired_batches(n_labeled: int, n_unlabeled: int, batch_size: int,
                   rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair one labeled with one unlabeled batch per step, one pass over the
    longer set; the shorter set reshuffles and cycles."""
    first_lab = shuffled_batches(n_labeled, batch_size, rng)
    first_unl = shuffled_batches(n_unlabeled, batch_size, rng)
    steps = max(len(first_lab), len(first_unl))

    def stream(first: list[np.ndarray], n: int) -> Iterator[np.ndarray]:
        yield from first
        while True:
            yield from shuffled_batches(n, batch_size, rng)

    lab, unl = stream(first_lab, n_labeled), stream(first_unl, n_unlabeled)
    return [(next(lab), next(unl)) for _ in range(steps)]
