"""Checkpoints: named float64 parameter arrays in a single .npz container.

Keys are dotted paths such as "student.encoder.layer0.weight". Projection
heads additionally carry their batch-norm running buffers; the presence of
"bn.*" keys signals that batch norm is enabled.
"""

from __future__ import annotations

import numpy as np

from .models import Encoder, HeadClassifier, Model, ProjectionHead
from .tensor import BatchNormState, Tensor


def save_checkpoint(path, components: dict) -> None:
    """Serialize components (anything exposing state_arrays()) under their names."""
    flat: dict[str, np.ndarray] = {}
    for name, component in components.items():
        for key, arr in component.state_arrays().items():
            flat[f"{name}.{key}"] = np.asarray(arr, dtype=np.float64)
    np.savez(path, **flat)


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _sub(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    p = prefix + "."
    out = {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
    if not out:
        raise KeyError(f"checkpoint has no arrays under {prefix!r}")
    return out


def encoder_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "encoder") -> Encoder:
    sub = _sub(arrays, prefix)
    weights, biases = [], []
    for i in range(sum(1 for k in sub if k.endswith(".weight"))):
        weights.append(Tensor(sub[f"layer{i}.weight"], requires_grad=True))
        biases.append(Tensor(sub[f"layer{i}.bias"], requires_grad=True))
    return Encoder(weights, biases)


def head_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "head") -> HeadClassifier:
    sub = _sub(arrays, prefix)
    return HeadClassifier(Tensor(sub["weight"], requires_grad=True),
                          Tensor(sub["bias"], requires_grad=True))


def projection_from_arrays(arrays: dict[str, np.ndarray], prefix: str) -> ProjectionHead:
    sub = _sub(arrays, prefix)
    bn = None
    if "bn.gamma" in sub:
        bn = BatchNormState(
            gamma=Tensor(sub["bn.gamma"], requires_grad=True),
            beta=Tensor(sub["bn.beta"], requires_grad=True),
            running_mean=sub["bn.running_mean"].copy(),
            running_var=sub["bn.running_var"].copy(),
        )
    return ProjectionHead(Tensor(sub["weight"], requires_grad=True),
                          Tensor(sub["bias"], requires_grad=True), bn)


def model_from_arrays(arrays: dict[str, np.ndarray], prefix: str) -> Model:
    return Model(encoder_from_arrays(arrays, f"{prefix}.encoder"),
                 head_from_arrays(arrays, f"{prefix}.head"))
