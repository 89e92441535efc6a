"""Evaluation metrics: accuracy, feature extraction, and linear CKA."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import Model
from .tensor import Tensor


@dataclass
class FeatureMatrix:
    """Row-per-sample feature matrix with a tag naming its source space."""

    values: np.ndarray
    source_tag: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"dim_{i}" for i in range(self.values.shape[1])])
            for row in self.values:
                writer.writerow([f"{v:.17g}" for v in row])


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    """Fraction of samples whose argmax logit matches the label; argmax picks
    the lowest class index on exact ties."""
    if len(x) == 0:
        raise ValueError("accuracy needs a non-empty eval set")
    correct = 0
    for start in range(0, len(x), batch_size):
        logits = model.forward(Tensor(x[start:start + batch_size])).data
        correct += int((np.argmax(logits, axis=1) == y[start:start + batch_size]).sum())
    return correct / len(x)


def error_rate(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return 1.0 - accuracy(model, x, y)


def extract_features(feature_fn: Callable[[Tensor], Tensor], x: np.ndarray,
                     tag: str = "", batch_size: int = 512,
                     cap: int | None = 2048) -> FeatureMatrix:
    """Apply a feature pipeline row by row in dataset order; gradients are
    never propagated and any batch-norm inside must run in eval mode."""
    if cap is not None:
        x = x[:cap]
    chunks = [feature_fn(Tensor(x[i:i + batch_size])).data
              for i in range(0, len(x), batch_size)]
    return FeatureMatrix(np.concatenate(chunks, axis=0), tag)


def _centered(m: np.ndarray) -> np.ndarray:
    return m - m.mean(axis=0, keepdims=True)


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment between two feature matrices with the
    same rows: ||Yc'Xc||_F^2 / (||Xc'Xc||_F ||Yc'Yc||_F), in [0, 1]."""
    xv = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    yv = y.values if isinstance(y, FeatureMatrix) else np.asarray(y, dtype=np.float64)
    if xv.ndim != 2 or yv.ndim != 2 or xv.shape[0] != yv.shape[0]:
        raise ValueError(f"linear_cka: incompatible shapes {xv.shape} and {yv.shape}")
    if xv.shape[0] < 2:
        raise ValueError("linear_cka needs at least 2 rows")
    xc, yc = _centered(xv), _centered(yv)
    norm_x = np.linalg.norm(xc.T @ xc)
    norm_y = np.linalg.norm(yc.T @ yc)
    if norm_x == 0.0 or norm_y == 0.0:
        raise ValueError("linear_cka: degenerate (constant) feature matrix")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (norm_x * norm_y))
