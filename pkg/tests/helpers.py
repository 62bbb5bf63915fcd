"""Shared fixtures-as-functions for the distillation tests."""

import numpy as np

from mctdistill import autodiff as ad
from mctdistill.autodiff import Tape, Tensor
from mctdistill.distill import inner_unroll, matching_loss
from mctdistill.model import ModelSpec, ParamVector, init_params


def meta_problem(seed=0, dim=4, hidden=8, C=3, ipc=1):
    """A start point, a target, synthetic features and labels for a tiny MLP."""
    spec = ModelSpec(dim, (hidden,), C)
    rng = np.random.default_rng(seed)
    start = init_params(spec, seed)
    target = ParamVector.unflatten(spec, start.flatten() + 0.1 * rng.normal(size=spec.num_params))
    features = rng.normal(size=(C * ipc, dim))
    labels = np.repeat(np.arange(C), ipc)
    return spec, start, target, features, labels


def meta_loss(start, target, features, labels, alpha, N):
    """Matching loss after an N-step unroll; opens its own tape if none is active."""
    def run():
        X = features if isinstance(features, Tensor) else Tensor(features)
        a = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
        return matching_loss(inner_unroll(start, X, labels, a, N), target, start)

    if ad.current_tape() is not None:
        return run()
    tape = Tape()
    with tape:
        out = run()
    tape.release()
    return out


def random_triple(spec, rng, scale=1.0):
    return [ParamVector.unflatten(spec, scale * rng.normal(size=spec.num_params)) for _ in range(3)]
