"""Convexified trajectories, continuous sampling and the binary trajectory formats.

A convexified trajectory keeps only a few anchor checkpoints (by default the
first and last) plus a per-timestep, per-group weight table ``beta``.  Inside
the segment between anchors ``a_j`` and ``a_{j+1}`` the waypoint at step
``t`` is, group by group::

    theta_hat[t] = (1 - beta[t]) * theta[a_j] + beta[t] * theta[a_{j+1}]

where ``beta[t]`` is the fraction of the segment's accumulated step length
covered by step ``t``.  Rows at anchors hold the value for the segment that
ends there (1), except row 0, which is 0; a segment starting at an interior
anchor treats its own start row as 0.

File layouts (little-endian, all integers u32)::

    MTTB  u8 version=1 | spec | K | G | shape table | (K+1) checkpoints f32 | K*G f64 norms
    MCTB  u8 version=1 | spec | K | m+1 | anchors u32[m+1] | (m+1) anchors f32 | (K+1)*G f64 beta

``spec`` is ``input_dim, num_hidden, widths[num_hidden], classes``; the shape
table is, per group, ``ndim`` followed by the dims.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateSegmentError, FormatError
from .expert import MttBuffer
from .model import ModelSpec, ParamVector

MTT_MAGIC = b"MTTB"
CONVEX_MAGIC = b"MCTB"
FORMAT_VERSION = 1


@dataclass(eq=False)
class ConvexTrajectory:
    spec: ModelSpec
    anchors: tuple[int, ...]
    anchor_params: list[ParamVector]
    beta: np.ndarray  # [(K+1), G]
    trajectory_id: str = ""

    def __post_init__(self):
        self.anchors = tuple(int(a) for a in self.anchors)
        K = self.beta.shape[0] - 1
        if len(self.anchors) < 2 or self.anchors[0] != 0 or self.anchors[-1] != K:
            raise ValueError(f"anchors must start at 0 and end at K={K}, got {self.anchors}")
        if any(b <= a for a, b in zip(self.anchors, self.anchors[1:])):
            raise ValueError(f"anchors must be strictly increasing, got {self.anchors}")
        if len(self.anchor_params) != len(self.anchors):
            raise ValueError("one parameter vector per anchor is required")

    @property
    def K(self) -> int:
        return self.beta.shape[0] - 1

    @property
    def num_groups(self) -> int:
        return self.beta.shape[1]

    def segment_of(self, c: float) -> int:
        """Index j of the segment [a_j, a_{j+1}] used for position ``c``."""
        for j in range(len(self.anchors) - 2, -1, -1):
            if c >= self.anchors[j]:
                return j
        return 0

    def beta_in_segment(self, t: int, j: int) -> np.ndarray:
        if t == self.anchors[j]:
            return np.zeros(self.num_groups)
        return self.beta[t]

    def waypoint(self, t: int) -> ParamVector:
        return sample_continuous(self, float(t))

    def same_content(self, other: "ConvexTrajectory") -> bool:
        return (
            self.spec == other.spec
            and self.anchors == other.anchors
            and all(a.equals(b) for a, b in zip(self.anchor_params, other.anchor_params))
            and np.array_equal(self.beta, other.beta)
        )


def _parse_anchors(anchors, K: int) -> tuple[int, ...]:
    out = []
    for a in anchors:
        if isinstance(a, str):
            a = K if a.strip().upper() == "K" else int(a)
        out.append(int(a))
    return tuple(out)


def convexify(buffer: MttBuffer, anchors: Sequence = (0, "K"), use_step_norms: bool = False) -> ConvexTrajectory:
    """Replace an expert trajectory by straight segments between anchor checkpoints.

    Within each segment and for every parameter group, ``beta[t]`` is the
    cumulative step length up to ``t`` divided by the segment's total length.
    """
    K = buffer.K
    anchors = _parse_anchors(anchors, K)
    if list(anchors) != sorted(set(anchors)) or anchors[0] != 0 or anchors[-1] != K:
        raise ValueError(f"anchors must be sorted, unique, and include 0 and K={K}; got {anchors}")
    if any(a < 0 or a > K for a in anchors):
        raise ValueError(f"anchors must lie in [0, {K}]")

    norms = buffer.delta_norms
    if use_step_norms:
        if buffer.step_norms is None:
            raise ValueError("buffer has no per-minibatch step norms")
        norms = buffer.step_norms

    G = buffer.num_groups
    beta = np.zeros((K + 1, G))
    for start, end in zip(anchors[:-1], anchors[1:]):
        seg = norms[start:end]
        total = seg.sum(axis=0)
        if np.any(total <= 0):
            bad = [buffer.spec.group_names[g] for g in np.flatnonzero(total <= 0)]
            raise DegenerateSegmentError(
                f"segment [{start}, {end}] has zero length in group(s) {', '.join(bad)}"
            )
        cum = np.cumsum(seg, axis=0)
        beta[start + 1:end + 1] = cum / total
        beta[end] = 1.0
    return ConvexTrajectory(
        spec=buffer.spec,
        anchors=anchors,
        anchor_params=[buffer.checkpoints[a].detach() for a in anchors],
        beta=beta,
        trajectory_id=buffer.trajectory_id,
    )


def interpolated_beta(traj: ConvexTrajectory, c: float) -> tuple[int, np.ndarray]:
    """Segment index and per-group weight at (possibly fractional) position ``c``."""
    if not 0 <= c <= traj.K:
        raise ValueError(f"position {c} outside [0, {traj.K}]")
    j = traj.segment_of(c)
    lo, hi = math.floor(c), math.ceil(c)
    eta = c - lo
    b_lo = traj.beta_in_segment(lo, j)
    if hi == lo:
        return j, b_lo
    b_hi = traj.beta_in_segment(hi, j)
    return j, (1.0 - eta) * b_lo + eta * b_hi


def sample_continuous(traj: ConvexTrajectory, c: float) -> ParamVector:
    """Parameters at position ``c`` in ``[0, K]`` on the convexified trajectory."""
    j, b = interpolated_beta(traj, float(c))
    start, end = traj.anchor_params[j], traj.anchor_params[j + 1]
    groups = [
        (1.0 - bg) * s.data + bg * e.data
        for bg, s, e in zip(b, start.groups, end.groups)
    ]
    return ParamVector(traj.spec, groups)


# ---------------------------------------------------------------------------
# binary formats


def _u32(*values) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def _spec_block(spec: ModelSpec) -> bytes:
    return _u32(spec.input_dim, len(spec.hidden_widths), *spec.hidden_widths, spec.num_classes)


def _payload(params: ParamVector) -> bytes:
    return b"".join(g.data.astype("<f4").tobytes() for g in params.groups)


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.name}: truncated while reading {what}: need {self.pos + n} bytes, have {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u32s(self, what: str, count: int) -> list[int]:
        return list(struct.unpack(f"<{count}I", self.take(4 * count, what)))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count, what), dtype=dtype, count=count).astype(np.float64)

    def header(self, magic: bytes) -> None:
        got = self.take(4, "magic")
        if got != magic:
            raise FormatError(f"{self.name}: bad magic {got!r}, expected {magic!r}")
        (version,) = struct.unpack("<B", self.take(1, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.name}: unsupported version {version}")

    def spec(self) -> ModelSpec:
        input_dim = self.u32("input_dim")
        num_hidden = self.u32("num_hidden")
        widths = self.u32s("widths", num_hidden)
        classes = self.u32("classes")
        try:
            return ModelSpec(input_dim, tuple(widths), classes)
        except ValueError as exc:
            raise FormatError(f"{self.name}: invalid model spec: {exc}") from exc

    def params(self, spec: ModelSpec) -> ParamVector:
        groups = []
        for name, shape in zip(spec.group_names, spec.group_shapes):
            n = int(np.prod(shape))
            groups.append(self.array("<f4", n, f"payload {name}").reshape(shape))
        return ParamVector(spec, groups)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.name}: {len(self.data) - self.pos} trailing bytes")


def encode_buffer(buffer: MttBuffer) -> bytes:
    out = io.BytesIO()
    spec = buffer.spec
    out.write(MTT_MAGIC + struct.pack("<B", FORMAT_VERSION))
    out.write(_spec_block(spec))
    out.write(_u32(buffer.K, buffer.num_groups))
    for shape in spec.group_shapes:
        out.write(_u32(len(shape), *shape))
    for ckpt in buffer.checkpoints:
        out.write(_payload(ckpt))
    out.write(np.asarray(buffer.delta_norms, dtype="<f8").tobytes())
    return out.getvalue()


def decode_buffer(data: bytes, name: str = "<buffer>") -> MttBuffer:
    r = _Reader(data, name)
    r.header(MTT_MAGIC)
    spec = r.spec()
    K = r.u32("K")
    G = r.u32("param_groups")
    if G != len(spec.group_shapes):
        raise FormatError(f"{name}: {G} groups declared, spec implies {len(spec.group_shapes)}")
    for expected in spec.group_shapes:
        ndim = r.u32("shape table")
        dims = tuple(r.u32s("shape table", ndim))
        if dims != expected:
            raise FormatError(f"{name}: group shape {dims} disagrees with spec {expected}")
    checkpoints = [r.params(spec) for _ in range(K + 1)]
    norms = r.array("<f8", K * G, "delta_norms").reshape(K, G)
    r.finish()
    return MttBuffer(spec=spec, checkpoints=checkpoints, delta_norms=norms, trajectory_id=Path(name).stem)


def encode_convex(traj: ConvexTrajectory) -> bytes:
    out = io.BytesIO()
    out.write(CONVEX_MAGIC + struct.pack("<B", FORMAT_VERSION))
    out.write(_spec_block(traj.spec))
    out.write(_u32(traj.K, len(traj.anchors), *traj.anchors))
    for params in traj.anchor_params:
        out.write(_payload(params))
    out.write(np.asarray(traj.beta, dtype="<f8").tobytes())
    return out.getvalue()


def decode_convex(data: bytes, name: str = "<convex>") -> ConvexTrajectory:
    r = _Reader(data, name)
    r.header(CONVEX_MAGIC)
    spec = r.spec()
    K = r.u32("K")
    count = r.u32("anchor count")
    anchors = r.u32s("anchors", count)
    params = [r.params(spec) for _ in range(count)]
    G = len(spec.group_shapes)
    beta = r.array("<f8", (K + 1) * G, "beta").reshape(K + 1, G)
    r.finish()
    try:
        return ConvexTrajectory(spec, tuple(anchors), params, beta, trajectory_id=Path(name).stem)
    except ValueError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def write_buffer(path, buffer: MttBuffer) -> int:
    data = encode_buffer(buffer)
    Path(path).write_bytes(data)
    return len(data)


def read_buffer(path) -> MttBuffer:
    path = Path(path)
    return decode_buffer(path.read_bytes(), str(path))


def write_convex(path, traj: ConvexTrajectory) -> int:
    data = encode_convex(traj)
    Path(path).write_bytes(data)
    return len(data)


def read_convex(path) -> ConvexTrajectory:
    path = Path(path)
    return decode_convex(path.read_bytes(), str(path))


@dataclass(frozen=True)
class StorageReport:
    bytes_mtt: int
    bytes_conv: int
    ratio: float
    K: int
    W: int
    beta_entries: int


def storage_report(buffer: MttBuffer, traj: ConvexTrajectory, mtt_path=None, conv_path=None) -> StorageReport:
    """Serialized sizes of both representations, from files when paths are given."""
    bytes_mtt = Path(mtt_path).stat().st_size if mtt_path else len(encode_buffer(buffer))
    bytes_conv = Path(conv_path).stat().st_size if conv_path else len(encode_convex(traj))
    return StorageReport(
        bytes_mtt=bytes_mtt,
        bytes_conv=bytes_conv,
        ratio=bytes_conv / bytes_mtt,
        K=buffer.K,
        W=buffer.spec.num_params,
        beta_entries=int(traj.beta.size),
    )
