"""Expert trajectories: mini-batch SGD on real data with per-epoch checkpoints."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import LabeledDataset
from .errors import MctError, NonFiniteError
from .model import ModelSpec, ParamVector, accuracy, init_params, numpy_loss_and_grads

THREADS_ENV = "MCTDISTILL_THREADS"


@dataclass(frozen=True)
class ExpertConfig:
    epochs: int = 20
    batch_size: int = 50
    lr: float = 0.05
    num_experts: int = 5
    base_seed: int = 0
    record_step_norms: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")


@dataclass(eq=False)
class MttBuffer:
    """A stored expert trajectory.

    ``checkpoints[t]`` is the model after ``t`` epochs, rounded to float32
    precision (the on-disk payload precision) but held as float64.
    ``delta_norms[l, g]`` is the L2 norm of group ``g`` of
    ``checkpoints[l + 1] - checkpoints[l]``.
    """

    spec: ModelSpec
    checkpoints: list[ParamVector]
    delta_norms: np.ndarray
    trajectory_id: str = ""
    val_accuracy: Optional[np.ndarray] = None
    # Summed per-minibatch group norms per epoch, when requested; not persisted.
    step_norms: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        K = len(self.checkpoints) - 1
        if K < 1:
            raise ValueError("a trajectory needs at least two checkpoints")
        G = len(self.spec.group_shapes)
        if self.delta_norms.shape != (K, G):
            raise ValueError(f"delta_norms shape {self.delta_norms.shape} != {(K, G)}")
        if np.any(self.delta_norms < 0):
            raise ValueError("delta norms must be non-negative")

    @property
    def K(self) -> int:
        return len(self.checkpoints) - 1

    @property
    def num_groups(self) -> int:
        return len(self.spec.group_shapes)

    def same_content(self, other: "MttBuffer") -> bool:
        return (
            self.spec == other.spec
            and len(self.checkpoints) == len(other.checkpoints)
            and all(a.equals(b) for a, b in zip(self.checkpoints, other.checkpoints))
            and np.array_equal(self.delta_norms, other.delta_norms)
        )


def checkpoint_delta_norms(checkpoints: list[ParamVector]) -> np.ndarray:
    return np.array([(b - a).group_norms() for a, b in zip(checkpoints[:-1], checkpoints[1:])])


def _snapshot(arrays) -> list[np.ndarray]:
    return [a.astype(np.float32).astype(np.float64) for a in arrays]


def train_expert(train: LabeledDataset, val: Optional[LabeledDataset], spec: ModelSpec,
                 config: ExpertConfig, seed: int) -> MttBuffer:
    """Train one expert from a seeded init, storing a checkpoint after every epoch."""
    if train.feature_dim != spec.input_dim:
        raise ValueError(f"dataset has {train.feature_dim} features, spec expects {spec.input_dim}")
    rng = np.random.default_rng([seed, 1])
    params = init_params(spec, seed)
    arrays = [a.copy() for a in params.arrays()]
    snaps = [ParamVector(spec, _snapshot(arrays))]
    n = len(train)
    step_norms = np.zeros((config.epochs, len(arrays))) if config.record_step_norms else None

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = numpy_loss_and_grads(arrays, train.features[batch], train.labels[batch])
            if not np.isfinite(loss):
                raise NonFiniteError(f"expert training diverged in epoch {epoch + 1}")
            for i, (a, g) in enumerate(zip(arrays, grads)):
                a -= config.lr * g
                if step_norms is not None:
                    step_norms[epoch, i] += config.lr * np.linalg.norm(g)
        snaps.append(ParamVector(spec, _snapshot(arrays)))

    val_acc = None
    if val is not None:
        val_acc = np.array([accuracy(p, val) for p in snaps])
    return MttBuffer(
        spec=spec,
        checkpoints=snaps,
        delta_norms=checkpoint_delta_norms(snaps),
        trajectory_id=f"expert_{seed}",
        val_accuracy=val_acc,
        step_norms=step_norms,
    )


class ExpertError(MctError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        super().__init__(f"expert {index}: {cause}")


def default_workers() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return 1


def _train_one(args):
    train, val, spec, config, seed = args
    return train_expert(train, val, spec, config, seed)


def train_expert_ensemble(train: LabeledDataset, val: Optional[LabeledDataset], spec: ModelSpec,
                          config: ExpertConfig, workers: Optional[int] = None) -> list[MttBuffer]:
    """Train ``num_experts`` independent experts; expert ``i`` uses ``base_seed + i``."""
    workers = workers or default_workers()
    jobs = [(train, val, spec, config, config.base_seed + i) for i in range(config.num_experts)]
    results: list[MttBuffer] = []
    if workers == 1:
        for i, job in enumerate(jobs):
            try:
                results.append(_train_one(job))
            except MctError as exc:
                raise ExpertError(i, exc) from exc
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_train_one, job) for job in jobs]
        for i, fut in enumerate(futures):
            try:
                results.append(fut.result())
            except MctError as exc:
                raise ExpertError(i, exc) from exc
    return results
