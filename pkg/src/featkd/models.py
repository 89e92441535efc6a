"""Encoders, head classifiers, and projection heads with freeze/share wiring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .optim import Sgd
from .tensor import BatchNormState, Tensor


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class Encoder:
    """Stack of dense layers, each followed by ReLU; output is the embedding."""

    def __init__(self, weights: Sequence[Tensor], biases: Sequence[Tensor]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("encoder needs matching, non-empty weight/bias lists")
        for i in range(1, len(weights)):
            if weights[i].shape[0] != weights[i - 1].shape[1]:
                raise ValueError(
                    f"encoder layer {i} input dim {weights[i].shape[0]} does not chain "
                    f"with previous output dim {weights[i - 1].shape[1]}"
                )
        self.weights = list(weights)
        self.biases = list(biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"encoder expects inputs of dim {self.input_dim}, got {x.shape}")
        for w, b in zip(self.weights, self.biases):
            x = T.relu(T.add(T.matmul(x, w), b))
        return x

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}


class HeadClassifier:
    """Affine map from embedding to class logits (softmax applied by losses)."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[-1] != self.input_dim:
            raise ValueError(f"head expects embeddings of dim {self.input_dim}, got {f.shape}")
        return T.add(T.matmul(f, self.weight), self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}


class ProjectionHead:
    """Linear -> (BatchNorm) -> ReLU adapter between embedding spaces."""

    def __init__(self, weight: Tensor, bias: Tensor, bn: BatchNormState | None):
        self.weight = weight
        self.bias = bias
        self.bn = bn

    @property
    def use_bn(self) -> bool:
        return self.bn is not None

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, f: Tensor, training: bool) -> Tensor:
        if f.shape[-1] != self.input_dim:
            raise ValueError(f"projector expects inputs of dim {self.input_dim}, got {f.shape}")
        h = T.add(T.matmul(f, self.weight), self.bias)
        if self.bn is not None:
            h = T.batch_norm(h, self.bn, training)
        return T.relu(h)

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight, "bias": self.bias}
        if self.bn is not None:
            out["bn.gamma"] = self.bn.gamma
            out["bn.beta"] = self.bn.beta
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters().items()}
        if self.bn is not None:
            out["bn.running_mean"] = self.bn.running_mean
            out["bn.running_var"] = self.bn.running_var
        return out


@dataclass
class Model:
    """Encoder plus head classifier; the student's whole inference path."""

    encoder: Encoder
    head: HeadClassifier

    def forward(self, x: Tensor) -> Tensor:
        return self.head.forward(self.encoder.forward(x))

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}


@dataclass
class FreezeMask:
    """Per-parameter trainable flags, realized through requires_grad."""

    trainable: dict[str, bool]

    def apply(self, params: dict[str, Tensor]) -> None:
        for name, flag in self.trainable.items():
            params[name].requires_grad = flag


def set_trainable(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def init_encoder(dims: Sequence[int], seed) -> Encoder:
    """He-initialized dense encoder; dims = [input, hidden..., embedding]."""
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"encoder dims must be >= 2 positive sizes, got {dims}")
    rng = _rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(Tensor(_he_normal(rng, d_in, d_out), requires_grad=True))
        biases.append(Tensor(np.zeros(d_out), requires_grad=True))
    return Encoder(weights, biases)


def init_head(embed_dim: int, classes: int, seed) -> HeadClassifier:
    if embed_dim <= 0 or classes <= 0:
        raise ValueError(f"head dims must be positive, got ({embed_dim}, {classes})")
    rng = _rng(seed)
    return HeadClassifier(
        weight=Tensor(_he_normal(rng, embed_dim, classes), requires_grad=True),
        bias=Tensor(np.zeros(classes), requires_grad=True),
    )


def init_projection(d_in: int, d_out: int, seed, use_bn: bool = True) -> ProjectionHead:
    if d_in <= 0 or d_out <= 0:
        raise ValueError(f"projection dims must be positive, got ({d_in}, {d_out})")
    rng = _rng(seed)
    return ProjectionHead(
        weight=Tensor(_he_normal(rng, d_in, d_out), requires_grad=True),
        bias=Tensor(np.zeros(d_out), requires_grad=True),
        bn=BatchNormState.create(d_out) if use_bn else None,
    )


@dataclass
class CustomizationPipeline:
    """Teacher-side stack (student head) o (teacher projector) o (teacher encoder).

    The encoder and head stay frozen during feature customization; only the
    projector trains. The head is the student's live head object, re-shared
    at the start of every customization stage.
    """

    teacher_encoder: Encoder
    projector: ProjectionHead
    head: HeadClassifier

    def forward(self, x: Tensor, training: bool) -> Tensor:
        f_t = self.teacher_encoder.forward(x)
        f_tilde = self.projector.forward(f_t, training)
        return self.head.forward(f_tilde)


def share_student_head(pipeline: CustomizationPipeline,
                       student_head: HeadClassifier) -> CustomizationPipeline:
    """Wire the student's head (same parameter storage) into the pipeline."""
    if student_head.input_dim != pipeline.projector.output_dim:
        raise ValueError(
            f"head input dim {student_head.input_dim} does not match projector "
            f"output dim {pipeline.projector.output_dim}"
        )
    pipeline.head = student_head
    return pipeline


def canonicalize_feature_scale(model: Model, x: np.ndarray, cap: int = 1024) -> float:
    """Rescale the encoder so its features have unit RMS on a reference batch.

    ReLU encoders are positively homogeneous, so dividing the last layer by s
    while multiplying the head weight by s leaves every logit unchanged; it
    only pins the embedding scale, which keeps feature-matching losses at
    sane magnitudes regardless of how far CE training inflated the margins.
    """
    feats = model.encoder.forward(Tensor(x[:cap])).data
    rms = float(np.sqrt((feats ** 2).mean()))
    if rms <= 0.0:
        return rms
    model.encoder.weights[-1].data /= rms
    model.encoder.biases[-1].data /= rms
    model.head.weight.data *= rms
    return rms


def calibrate_logit_scale(model: Model, x: np.ndarray, target_rms: float = 2.0,
                          cap: int = 1024) -> float:
    """Uniformly rescale the head so logits have the target RMS on a
    reference batch. Argmax (and so accuracy) is unchanged; this only
    removes the extreme softmax saturation that CE pretraining builds on
    separable data, which otherwise makes later fine-tuning ill-conditioned.
    """
    logits = model.forward(Tensor(x[:cap])).data
    rms = float(np.sqrt((logits ** 2).mean()))
    if rms <= 0.0:
        return rms
    model.head.weight.data *= target_rms / rms
    model.head.bias.data *= target_rms / rms
    return rms


def linear_probe(encoder: Encoder, x: np.ndarray, y: np.ndarray, classes: int,
                 epochs: int, lr: float, seed, batch_size: int = 32,
                 momentum: float = 0.9) -> HeadClassifier:
    """Train only a head classifier on frozen-encoder features of labeled data."""
    if len(x) == 0:
        raise ValueError("linear probe needs non-empty labeled data")
    if np.unique(y).size < 2:
        raise ValueError("degenerate labels: linear probe needs at least 2 distinct classes")
    rng = _rng(seed)
    set_trainable(encoder.parameters().values(), False)
    feats = encoder.forward(Tensor(x)).data  # frozen features, computed once
    head = init_head(encoder.output_dim, classes, rng)
    opt = Sgd(head.parameters().values(), lr=lr, momentum=momentum)
    from .losses import cross_entropy  # local import to avoid a module cycle

    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = head.forward(Tensor(feats[idx]))
            loss = cross_entropy(logits, y[idx])
            T.backward(loss)
            opt.step()
    return head
