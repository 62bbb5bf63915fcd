"""Multilayer perceptron surrogate with a per-group parameter partition.

Parameters are kept as an ordered tuple of groups, ``fc0.weight, fc0.bias,
fc1.weight, ...``; weights are ``[fan_in, fan_out]`` so a layer computes
``x @ W + b``.  On a tape the groups are differentiable tensors; off the tape
they are constants.

Two code paths compute the loss gradient: the tape (used where gradients
must themselves be differentiated) and :func:`numpy_loss_and_grads`, a
hand-written backward pass for bulk training where only first-order
gradients are needed.  The tests hold them against each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteError


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        dims = (self.input_dim, *self.hidden_widths, self.num_classes)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all model dimensions must be positive, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_widths, self.num_classes)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_layers(self) -> int:
        return len(self.hidden_widths) + 1

    @property
    def group_names(self) -> list[str]:
        names = []
        for i in range(self.num_layers):
            names += [f"fc{i}.weight", f"fc{i}.bias"]
        return names

    @property
    def group_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for fan_in, fan_out in self.layer_dims:
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    @property
    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.group_shapes))


class ParamVector:
    """Model parameters as an ordered tuple of group tensors."""

    __slots__ = ("spec", "groups")

    def __init__(self, spec: ModelSpec, groups: Sequence):
        groups = tuple(g if isinstance(g, Tensor) else Tensor(g) for g in groups)
        shapes = [g.shape for g in groups]
        if shapes != spec.group_shapes:
            raise ValueError(f"group shapes {shapes} do not match spec {spec.group_shapes}")
        self.spec = spec
        self.groups = groups

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    @property
    def names(self) -> list[str]:
        return self.spec.group_names

    def arrays(self) -> list[np.ndarray]:
        return [g.data for g in self.groups]

    def flatten(self) -> np.ndarray:
        return np.concatenate([g.data.reshape(-1) for g in self.groups])

    @classmethod
    def unflatten(cls, spec: ModelSpec, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.num_params,):
            raise ValueError(f"expected {spec.num_params} values, got {flat.shape}")
        groups, start = [], 0
        for shape in spec.group_shapes:
            n = int(np.prod(shape))
            groups.append(flat[start:start + n].reshape(shape).copy())
            start += n
        return cls(spec, groups)

    def detach(self) -> "ParamVector":
        return ParamVector(self.spec, [g.data.copy() for g in self.groups])

    def group_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(g.data.reshape(-1)) for g in self.groups])

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector(self.spec, [a.data - b.data for a, b in zip(self.groups, other.groups)])

    def equals(self, other: "ParamVector") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(a.data, b.data) for a, b in zip(self.groups, other.groups)
        )

    def __repr__(self):
        return f"ParamVector({self.spec}, W={self.spec.num_params})"


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    groups = []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        groups.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        groups.append(np.zeros(fan_out))
    return ParamVector(spec, groups)


def _check_labels(spec: ModelSpec, labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes}), got max {labels.max()}")


def logits(params: ParamVector, features) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.data.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(f"expected features [n, {params.spec.input_dim}], got {x.shape}")
    n = x.shape[0]
    last = params.spec.num_layers - 1
    for i in range(params.spec.num_layers):
        W, b = params.groups[2 * i], params.groups[2 * i + 1]
        x = ad.add(ad.matmul(x, W), ad.broadcast_to(b, (n, b.shape[0])))
        if i < last:
            x = ad.relu(x)
    return x


def forward_loss(params: ParamVector, features, labels) -> Tensor:
    """Mean softmax cross-entropy; differentiable in params and features."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    _check_labels(params.spec, labels)
    logp = ad.log_softmax(logits(params, features))
    picked = ad.gather_rows(logp, labels)
    return ad.scalar_mul(ad.sum(picked), -1.0 / labels.size)


def sgd_step(params: ParamVector, grads: Sequence[Tensor], lr) -> ParamVector:
    """``theta - lr * g`` per group; ``lr`` may be a differentiable scalar tensor."""
    lr_t = lr if isinstance(lr, Tensor) else Tensor(float(lr))
    if lr_t.size != 1:
        raise ValueError("learning rate must be a scalar")
    out = []
    for p, g in zip(params.groups, grads):
        out.append(ad.sub(p, ad.mul(ad.broadcast_to(lr_t, p.shape), g)))
    return ParamVector(params.spec, out)


def predict(params: ParamVector, features: np.ndarray) -> np.ndarray:
    return numpy_logits(params.arrays(), np.asarray(features)).argmax(axis=1)


def accuracy(params: ParamVector, dataset) -> float:
    """Fraction of argmax matches; ties go to the lowest class index."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(params, dataset.features) == dataset.labels))


# ---------------------------------------------------------------------------
# plain numpy path


def numpy_logits(arrays: Sequence[np.ndarray], features: np.ndarray) -> np.ndarray:
    x = features
    n_layers = len(arrays) // 2
    for i in range(n_layers):
        x = x @ arrays[2 * i] + arrays[2 * i + 1]
        if i < n_layers - 1:
            x = np.maximum(x, 0.0)
    return x


def numpy_loss_and_grads(arrays: Sequence[np.ndarray], features: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its parameter gradients, without a tape."""
    n_layers = len(arrays) // 2
    acts = [features]
    x = features
    for i in range(n_layers):
        x = x @ arrays[2 * i] + arrays[2 * i + 1]
        if i < n_layers - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    z = acts[-1]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta /= n
    grads = [None] * len(arrays)
    for i in reversed(range(n_layers)):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ arrays[2 * i].T) * (acts[i] > 0)
    return float(loss), grads


def train_full_batch(params: ParamVector, features: np.ndarray, labels: np.ndarray,
                     lr: float, iters: int) -> ParamVector:
    """``iters`` steps of full-batch SGD on a small set; raises on divergence."""
    arrays = [a.copy() for a in params.arrays()]
    labels = np.asarray(labels, dtype=np.int64)
    for step in range(iters):
        loss, grads = numpy_loss_and_grads(arrays, features, labels)
        if not np.isfinite(loss):
            raise NonFiniteError(f"training loss became non-finite at step {step}")
        for a, g in zip(arrays, grads):
            a -= lr * g
    return ParamVector(params.spec, arrays)
