"""Outer loop of trajectory-matching distillation.

Each outer iteration picks an expert, samples a start point and a target
``M`` epochs later on its trajectory, runs ``N`` differentiable SGD steps of
a student on the synthetic set from the start point, and moves the synthetic
features and the student learning rate down the gradient of the normalized
distance between student and target.

Two trajectory sources are supported: ``"mtt"`` uses the stored expert
checkpoints at integer epochs; ``"mct"`` uses the convexified trajectory and,
with continuous sampling, fractional start positions.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, grad
from .datasets import LabeledDataset
from .errors import ConfigError, DegenerateSegmentError, FormatError, MctError, NonFiniteError, with_context
from .expert import MttBuffer
from .model import ParamVector, forward_loss, sgd_step
from .seeding import derive_seed
from .trajectory import ConvexTrajectory, convexify, sample_continuous

ALPHA_FLOOR = 1e-6
MAX_RESAMPLE = 10
SYNTHETIC_MAGIC = b"SYND"


@dataclass
class SyntheticDataset:
    features: np.ndarray  # [C * ipc, d]
    labels: np.ndarray  # [C * ipc], class-major
    alpha: float
    ipc: int
    num_classes: int

    def __post_init__(self):
        expected = np.repeat(np.arange(self.num_classes), self.ipc)
        if not np.array_equal(self.labels, expected):
            raise ValueError("labels must hold exactly ipc examples per class in class order")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("one feature row per label is required")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.features.copy(), self.labels.copy(), self.alpha, self.ipc, self.num_classes)

    def as_dataset(self) -> LabeledDataset:
        return LabeledDataset(self.features.copy(), self.labels.copy(), self.num_classes, "synthetic")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "mct"
    ipc: int = 1
    M: int = 2
    N: int = 10
    max_start_epoch: float = 10.0
    outer_lr_features: float = 1.0
    outer_lr_alpha: float = 1e-3
    outer_iters: int = 1000
    eval_every: int = 50
    continuous_sampling: bool = True
    alpha_init: Optional[float] = None
    anchors: tuple = (0, "K")
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mtt", "mct"):
            raise ValueError(f"mode must be 'mtt' or 'mct', got {self.mode!r}")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if self.ipc < 1:
            raise ValueError("ipc must be >= 1")
        if self.max_start_epoch < 0:
            raise ValueError("max_start_epoch must be >= 0")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class DistillReport:
    losses: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    start_positions: list = field(default_factory=list)
    eval_iterations: list = field(default_factory=list)
    eval_mean: list = field(default_factory=list)
    eval_std: list = field(default_factory=list)
    final_alpha: Optional[float] = None
    convergence_iteration: Optional[int] = None
    wall_time: float = 0.0

    def eval_trace(self) -> list[tuple[int, float]]:
        return list(zip(self.eval_iterations, self.eval_mean))


# ---------------------------------------------------------------------------
# losses


def _squared_distance(a: Sequence[Tensor], b: Sequence[Tensor]) -> Tensor:
    total = None
    for x, y in zip(a, b):
        term = ad.sum(ad.square(ad.sub(x, y)))
        total = term if total is None else ad.add(total, term)
    return total


def _squared_norm_np(groups: Sequence[np.ndarray]) -> float:
    return float(sum(np.dot(g.ravel(), g.ravel()) for g in groups))


def matching_loss(student_end: ParamVector, target: ParamVector, start: ParamVector) -> Tensor:
    """``|student_end - target|^2 / |start - target|^2`` over all parameters."""
    denom = _squared_norm_np([s.data - t.data for s, t in zip(start.groups, target.groups)])
    if denom == 0:
        raise DegenerateSegmentError("degenerate segment: start equals target")
    return ad.scalar_mul(_squared_distance(student_end.groups, target.groups), 1.0 / denom)


def reformulated_loss(student_end: ParamVector, target: ParamVector, start: ParamVector) -> Tensor:
    """The same loss written with update vectors from the start point.

    ``|V_S - V_T|^2 / |V_T|^2`` with ``V_S = student_end - start`` and
    ``V_T = target - start``.
    """
    v_t = [Tensor(t.data - s.data) for t, s in zip(target.groups, start.groups)]
    denom = _squared_norm_np([v.data for v in v_t])
    if denom == 0:
        raise DegenerateSegmentError("degenerate segment: start equals target")
    v_s = [ad.sub(e, s) for e, s in zip(student_end.groups, start.groups)]
    return ad.scalar_mul(_squared_distance(v_s, v_t), 1.0 / denom)


# ---------------------------------------------------------------------------
# inner loop


def inner_unroll(start: ParamVector, features: Tensor, labels: np.ndarray, alpha: Tensor, N: int) -> ParamVector:
    """``N`` full-batch SGD steps on the synthetic set, recorded on the active tape."""
    if N < 1:
        raise ValueError("N must be >= 1")
    params = start
    for step in range(N):
        loss = forward_loss(params, features, labels)
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"student loss became non-finite at inner step {step}")
        grads = grad(loss, list(params.groups))
        params = sgd_step(params, grads, alpha)
    return params


# ---------------------------------------------------------------------------
# sampling


Trajectory = Union[MttBuffer, ConvexTrajectory]


def _trajectory_K(traj: Trajectory) -> int:
    return traj.K


def _params_at(traj: Trajectory, position: float) -> ParamVector:
    if isinstance(traj, MttBuffer):
        return traj.checkpoints[int(position)]
    return sample_continuous(traj, position)


def _draw_position(mode: str, config: DistillConfig, upper: float, rng: np.random.Generator) -> float:
    if mode == "mtt" or not config.continuous_sampling:
        return float(rng.integers(0, int(np.floor(upper)) + 1))
    return float(rng.uniform(0.0, upper))


def sample_start(mode: str, traj: Trajectory, config: DistillConfig, rng: np.random.Generator):
    """Draw ``(theta_start, theta_target, position)``; targets past ``K`` clamp to ``K``."""
    K = _trajectory_K(traj)
    upper = min(float(config.max_start_epoch), float(K))
    if mode == "mtt" and not isinstance(traj, MttBuffer):
        raise ValueError("mtt mode samples stored checkpoints and needs an MttBuffer")
    if mode == "mct" and not isinstance(traj, ConvexTrajectory):
        raise ValueError("mct mode needs a ConvexTrajectory")
    for _ in range(MAX_RESAMPLE):
        c = _draw_position(mode, config, upper, rng)
        start = _params_at(traj, c)
        target = _params_at(traj, min(c + config.M, K))
        if _squared_norm_np([s.data - t.data for s, t in zip(start.groups, target.groups)]) > 0:
            return start, target, c
    raise DegenerateSegmentError(f"start equals target in {MAX_RESAMPLE} consecutive draws")


# ---------------------------------------------------------------------------
# outer loop


def init_synthetic(real: LabeledDataset, ipc: int, alpha: float, seed: int) -> SyntheticDataset:
    """One seeded real example per synthetic slot, ``ipc`` per class."""
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(real.num_classes):
        members = np.flatnonzero(real.labels == c)
        if members.size < ipc:
            raise ValueError(f"class {c} has {members.size} examples, need {ipc}")
        rows.append(rng.choice(members, size=ipc, replace=False))
    idx = np.concatenate(rows)
    labels = np.repeat(np.arange(real.num_classes), ipc)
    return SyntheticDataset(real.features[idx].copy(), labels, float(alpha), ipc, real.num_classes)


def prepare_trajectories(experts: Sequence[Trajectory], config: DistillConfig) -> list[Trajectory]:
    if not experts:
        raise ValueError("at least one expert trajectory is required")
    if config.mode == "mtt":
        if not all(isinstance(e, MttBuffer) for e in experts):
            raise ValueError("mtt mode needs full expert buffers")
        return list(experts)
    return [e if isinstance(e, ConvexTrajectory) else convexify(e, config.anchors) for e in experts]


def distill(
    experts: Sequence[Trajectory],
    real: LabeledDataset,
    config: DistillConfig,
    expert_lr: Optional[float] = None,
    eval_fn: Optional[Callable[[SyntheticDataset], tuple[float, float]]] = None,
    synthetic: Optional[SyntheticDataset] = None,
) -> tuple[SyntheticDataset, DistillReport]:
    """Run ``config.outer_iters`` outer updates and return the synthetic set and traces.

    ``eval_fn`` maps a snapshot of the synthetic set to ``(mean, std)``
    accuracy; it runs at iteration 0, every ``eval_every`` iterations, and at
    the end.
    """
    trajs = prepare_trajectories(experts, config)
    shortest = min(t.K for t in trajs)
    if config.max_start_epoch > shortest - config.M:
        raise ConfigError(
            f"max_start_epoch {config.max_start_epoch} exceeds K - M = {shortest - config.M} for the shortest expert"
        )
    alpha0 = config.alpha_init if config.alpha_init is not None else expert_lr
    if alpha0 is None:
        raise ValueError("alpha_init or expert_lr is required")
    if synthetic is None:
        synthetic = init_synthetic(real, config.ipc, alpha0, derive_seed(config.seed, "synthetic-init"))
    else:
        synthetic = synthetic.copy()
    rng = np.random.default_rng(derive_seed(config.seed, "start-sampling"))
    report = DistillReport()
    t0 = time.perf_counter()

    def evaluate(iteration: int) -> None:
        if eval_fn is None:
            return
        mean, std = eval_fn(synthetic.copy())
        report.eval_iterations.append(iteration)
        report.eval_mean.append(float(mean))
        report.eval_std.append(float(std))

    for it in range(config.outer_iters):
        if it % config.eval_every == 0:
            evaluate(it)
        traj = trajs[int(rng.integers(len(trajs)))]
        try:
            start, target, c = sample_start(config.mode, traj, config, rng)
            tape = Tape()
            with tape:
                X = Tensor(synthetic.features)
                alpha = Tensor(synthetic.alpha)
                end = inner_unroll(start, X, synthetic.labels, alpha, config.N)
                loss = matching_loss(end, target, start)
                g_x, g_alpha = grad(loss, [X, alpha])
                loss_value = loss.item()
                g_x, g_alpha = g_x.data, g_alpha.item()
            tape.release()
        except MctError as exc:
            raise with_context(exc, f"outer iteration {it}") from exc
        if not np.isfinite(loss_value):
            raise NonFiniteError(f"outer iteration {it}: matching loss is non-finite")
        report.losses.append(loss_value)
        report.alphas.append(synthetic.alpha)
        report.start_positions.append(c)
        synthetic.features = synthetic.features - config.outer_lr_features * g_x
        synthetic.alpha = max(synthetic.alpha - config.outer_lr_alpha * g_alpha, ALPHA_FLOOR)
    if eval_fn is not None and (not report.eval_iterations or report.eval_iterations[-1] != config.outer_iters):
        evaluate(config.outer_iters)
    report.final_alpha = synthetic.alpha
    report.wall_time = time.perf_counter() - t0
    return synthetic, report


# ---------------------------------------------------------------------------
# files


def encode_synthetic(syn: SyntheticDataset) -> bytes:
    out = [SYNTHETIC_MAGIC, struct.pack("<B", 1)]
    out.append(struct.pack("<3I", syn.num_classes, syn.ipc, syn.feature_dim))
    out.append(syn.labels.astype("<u4").tobytes())
    out.append(syn.features.astype("<f8").tobytes())
    out.append(struct.pack("<d", syn.alpha))
    return b"".join(out)


def decode_synthetic(data: bytes, name: str = "<synthetic>") -> SyntheticDataset:
    if data[:4] != SYNTHETIC_MAGIC:
        raise FormatError(f"{name}: bad magic {data[:4]!r}, expected {SYNTHETIC_MAGIC!r}")
    if len(data) < 17:
        raise FormatError(f"{name}: truncated header")
    if data[4] != 1:
        raise FormatError(f"{name}: unsupported version {data[4]}")
    C, ipc, d = struct.unpack("<3I", data[5:17])
    n = C * ipc
    expected = 17 + 4 * n + 8 * n * d + 8
    if len(data) != expected:
        raise FormatError(f"{name}: expected {expected} bytes, got {len(data)}")
    pos = 17
    labels = np.frombuffer(data, "<u4", n, pos).astype(np.int64)
    pos += 4 * n
    features = np.frombuffer(data, "<f8", n * d, pos).reshape(n, d).astype(np.float64)
    pos += 8 * n * d
    (alpha,) = struct.unpack("<d", data[pos:pos + 8])
    try:
        return SyntheticDataset(features, labels, alpha, ipc, C)
    except ValueError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def write_synthetic(path, syn: SyntheticDataset) -> None:
    Path(path).write_bytes(encode_synthetic(syn))


def read_synthetic(path) -> SyntheticDataset:
    path = Path(path)
    return decode_synthetic(path.read_bytes(), str(path))


def write_report_csv(path, report: DistillReport) -> None:
    """One row per outer iteration plus a final row for the end state.

    ``alpha_S`` is the student learning rate in effect at that iteration;
    ``loss`` is blank on the final row and ``eval_accuracy`` is blank off
    the evaluation grid.
    """
    evals = dict(zip(report.eval_iterations, report.eval_mean))
    n = len(report.losses)
    lines = ["iteration,loss,alpha_S,eval_accuracy"]
    for i in range(n):
        acc = f"{evals[i]:.17g}" if i in evals else ""
        lines.append(f"{i},{report.losses[i]:.17g},{report.alphas[i]:.17g},{acc}")
    final_alpha = report.final_alpha if report.final_alpha is not None else ""
    acc = f"{evals[n]:.17g}" if n in evals else ""
    lines.append(f"{n},,{final_alpha if final_alpha == '' else format(final_alpha, '.17g')},{acc}")
    Path(path).write_text("\n".join(lines) + "\n")
