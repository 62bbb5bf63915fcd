"""Evaluation of distilled sets and trajectory diagnostics.

Accuracies from :func:`evaluate_synthetic` are fractions in [0, 1].
:func:`convergence_iteration` and :func:`stability_metric` take traces in
whatever unit the caller uses; ``epsilon`` must be in the same unit (the
default 2.0 assumes percent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datasets import LabeledDataset
from .errors import MctError
from .model import ModelSpec, ParamVector, accuracy, init_params, train_full_batch


@dataclass
class EvalReport:
    accuracies: list[float]
    convergence_iteration: Optional[int] = None
    post_convergence_std: Optional[float] = None
    baseline_accuracy: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.accuracies:
            raise ValueError("at least one repeat is required")

    @property
    def repeats(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # population std over repeats; a single repeat reports 0
        return float(np.std(self.accuracies))


def _train_and_score(features, labels, val: LabeledDataset, spec: ModelSpec,
                     lr: float, train_iters: int, seed: int) -> float:
    params = train_full_batch(init_params(spec, seed), features, labels, lr, train_iters)
    return accuracy(params, val)


def evaluate_synthetic(synthetic, val: LabeledDataset, spec: ModelSpec, repeats: int = 5,
                       train_iters: int = 1000, seed: int = 0, lr: Optional[float] = None) -> EvalReport:
    """Train ``repeats`` fresh networks on the synthetic set and score them on ``val``.

    Repeat ``r`` initializes from ``seed + r`` and runs ``train_iters``
    full-batch SGD steps at the synthetic set's learned rate (or ``lr``).
    """
    if repeats < 1 or train_iters < 1:
        raise ValueError("repeats and train_iters must be >= 1")
    rate = synthetic.alpha if lr is None else lr
    accs = [
        _train_and_score(synthetic.features, synthetic.labels, val, spec, rate, train_iters, seed + r)
        for r in range(repeats)
    ]
    return EvalReport(accs)


def sample_per_class(train: LabeledDataset, ipc: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(train.num_classes):
        members = np.flatnonzero(train.labels == c)
        if members.size < ipc:
            raise MctError(f"class {c} has {members.size} examples, need {ipc}")
        rows.append(rng.choice(members, size=ipc, replace=False))
    return np.concatenate(rows)


def random_subset_baseline(train: LabeledDataset, ipc: int, val: LabeledDataset, spec: ModelSpec,
                           lr: float, repeats: int = 5, train_iters: int = 1000, seed: int = 0) -> EvalReport:
    """Same protocol as :func:`evaluate_synthetic`, on ``ipc`` real examples per class.

    Each repeat draws its own subset, seeded by ``seed + r``.
    """
    if repeats < 1 or train_iters < 1:
        raise ValueError("repeats and train_iters must be >= 1")
    accs = []
    for r in range(repeats):
        idx = sample_per_class(train, ipc, seed + r)
        accs.append(_train_and_score(train.features[idx], train.labels[idx], val, spec, lr, train_iters, seed + r))
    report = EvalReport(accs)
    report.baseline_accuracy = report.mean
    return report


def convergence_iteration(trace: Sequence[tuple[int, float]], epsilon: float = 2.0) -> Optional[int]:
    """Earliest recorded iteration after which every accuracy stays within ``epsilon`` of the maximum.

    Returns ``None`` if the trace never settles (only possible when the last
    point itself is ``epsilon`` or more below the maximum).
    """
    if not trace:
        raise ValueError("empty trace")
    iters = [it for it, _ in trace]
    accs = np.array([a for _, a in trace], dtype=float)
    best = accs.max()
    result = None
    for k in range(len(accs) - 1, -1, -1):
        if best - accs[k] < epsilon:
            result = iters[k]
        else:
            break
    return result


def stability_metric(trace: Sequence, tail: int) -> float:
    """Sample standard deviation of the last ``tail`` accuracies."""
    if tail < 2:
        raise ValueError("tail must be >= 2")
    values = [v[1] if isinstance(v, tuple) else v for v in trace]
    if tail > len(values):
        raise ValueError(f"tail {tail} exceeds trace length {len(values)}")
    return float(np.std(values[-tail:], ddof=1))


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaProjection:
    components: np.ndarray  # [k, P], orthonormal rows
    variances: np.ndarray  # [k]
    projections: np.ndarray  # [T, k]
    one_minus_val_acc: Optional[np.ndarray] = None
    iterations: list = field(default_factory=list)


def _orthogonalize(v: np.ndarray, basis: list) -> np.ndarray:
    # two passes keep v orthogonal even when it starts nearly parallel to the basis
    for _ in range(2):
        for p in basis:
            v = v - (v @ p) * p
    return v


def _power_iteration(X: np.ndarray, prev: list, rng, tol: float, max_iter: int):
    v = _orthogonalize(rng.normal(size=X.shape[1]), prev)
    v /= np.linalg.norm(v)
    it = 0
    for it in range(1, max_iter + 1):
        w = _orthogonalize(X.T @ (X @ v), prev)
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        w = _orthogonalize(w / norm, prev)
        w /= np.linalg.norm(w)
        if w @ v < 0:
            w = -w
        delta = np.linalg.norm(w - v)
        v = w
        if delta < tol:
            break
    return v, float(np.linalg.norm(X @ v) ** 2), it


def pca_project_trajectory(waypoints: Sequence, num_components: int = 2, val: Optional[LabeledDataset] = None,
                           seed: int = 0, tol: float = 1e-9, max_iter: int = 1000) -> PcaProjection:
    """Project flattened waypoints onto their top principal directions.

    Directions come from power iteration on the centered data with
    deflation against the directions already found.  ``variances`` are the
    per-component sums of squared projections divided by ``T - 1``.
    """
    if len(waypoints) < 3:
        raise ValueError("at least 3 waypoints are required")
    flat = np.stack([w.flatten() if isinstance(w, ParamVector) else np.asarray(w, float) for w in waypoints])
    X = flat - flat.mean(axis=0)
    if not np.any(X):
        raise MctError("rank-deficient trajectory: all waypoints are identical")
    rng = np.random.default_rng(seed)
    residual = X
    comps, lams, its = [], [], []
    for _ in range(num_components):
        v, lam, it = _power_iteration(residual, comps, rng, tol, max_iter)
        residual = residual - np.outer(residual @ v, v)
        comps.append(v)
        lams.append(lam)
        its.append(it)
    components = np.stack(comps)
    # signs fixed so the first waypoint projects non-positively
    proj = X @ components.T
    signs = np.where(proj[0] > 0, -1.0, 1.0)
    components *= signs[:, None]
    proj *= signs[None, :]
    variances = np.array(lams) / (len(waypoints) - 1)
    errs = None
    if val is not None:
        errs = np.array([1.0 - accuracy(w, val) for w in waypoints])
    return PcaProjection(components, variances, proj, errs, its)


# ---------------------------------------------------------------------------
# CSV


def write_eval_trace_csv(path, iterations, means, stds) -> None:
    lines = ["iteration,mean_acc,std_acc"]
    lines += [f"{i},{m:.17g},{s:.17g}" for i, m, s in zip(iterations, means, stds)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_pca_csv(path, pca: PcaProjection) -> None:
    lines = ["index,pc1,pc2,one_minus_val_acc"]
    for i, row in enumerate(pca.projections):
        err = "" if pca.one_minus_val_acc is None else f"{pca.one_minus_val_acc[i]:.17g}"
        pc2 = row[1] if row.size > 1 else math.nan
        lines.append(f"{i},{row[0]:.17g},{pc2:.17g},{err}")
    Path(path).write_text("\n".join(lines) + "\n")


COMPARISON_COLUMNS = ["method", "ipc", "mean", "std", "convergence_iter", "storage_bytes"]


def write_comparison_csv(path, rows: Sequence[dict]) -> None:
    lines = [",".join(COMPARISON_COLUMNS)]
    for row in rows:
        cells = []
        for col in COMPARISON_COLUMNS:
            v = row.get(col)
            cells.append("" if v is None else (f"{v:.17g}" if isinstance(v, float) else str(v)))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
