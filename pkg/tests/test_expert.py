import os
import time

import numpy as np
import pytest

from mctdistill.datasets import desk_blobs, gen_blobs
from mctdistill.errors import MctError
from mctdistill.expert import (
    ExpertConfig,
    ExpertError,
    default_workers,
    train_expert,
    train_expert_ensemble,
)
from mctdistill.model import ModelSpec, numpy_loss_and_grads
from mctdistill.trajectory import encode_buffer

DESK = ModelSpec(16, (64, 64), 4)


def bayes_accuracy(dataset, seed, num_classes=4, dim=16):
    """Nearest-true-mean accuracy: optimal for equal isotropic covariances and equal priors."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    d = ((dataset.features[:, None, :] - means[None]) ** 2).sum(-1)
    return float(np.mean(d.argmin(1) == dataset.labels))


@pytest.fixture(scope="module")
def desk():
    return desk_blobs(seed=1)


@pytest.fixture(scope="module")
def small():
    return gen_blobs(3, 30, 4, 0.5, 0), ModelSpec(4, (6,), 3)


def test_zero_lr_freezes_trajectory(small):
    data, spec = small
    buf = train_expert(data, None, spec, ExpertConfig(epochs=3, lr=0.0, batch_size=10), seed=0)
    assert all(c.equals(buf.checkpoints[0]) for c in buf.checkpoints)
    assert np.all(buf.delta_norms == 0)


def test_config_validation():
    for kwargs in ({"epochs": 0}, {"batch_size": 0}, {"lr": -1.0}, {"num_experts": 0}):
        with pytest.raises(ValueError):
            ExpertConfig(**kwargs)


def test_buffer_shape_and_norms(small):
    data, spec = small
    buf = train_expert(data, data, spec, ExpertConfig(epochs=4, batch_size=7), seed=3)
    assert buf.K == 4 and len(buf.checkpoints) == 5
    assert buf.delta_norms.shape == (4, len(spec.group_names))
    recomputed = np.array([
        [np.linalg.norm(b.groups[g].data - a.groups[g].data) for g in range(len(a.groups))]
        for a, b in zip(buf.checkpoints[:-1], buf.checkpoints[1:])
    ])
    np.testing.assert_allclose(buf.delta_norms, recomputed, rtol=1e-12, atol=0)
    assert np.all(buf.delta_norms >= 0)
    assert buf.val_accuracy.shape == (5,)


def test_same_seed_bit_identical(small):
    data, spec = small
    cfg = ExpertConfig(epochs=3, batch_size=8)
    a = train_expert(data, None, spec, cfg, seed=5)
    b = train_expert(data, None, spec, cfg, seed=5)
    assert encode_buffer(a) == encode_buffer(b)
    c = train_expert(data, None, spec, cfg, seed=6)
    assert encode_buffer(a) != encode_buffer(c)


def test_step_norms_bound_checkpoint_norms(small):
    data, spec = small
    buf = train_expert(data, None, spec, ExpertConfig(epochs=3, batch_size=8, record_step_norms=True), seed=1)
    # triangle inequality: the epoch displacement is no longer than the path walked
    assert np.all(buf.delta_norms <= buf.step_norms * (1 + 1e-6) + 1e-7)


def test_divergence_names_epoch(small):
    data, spec = small
    with pytest.raises(MctError, match="epoch"):
        with np.errstate(all="ignore"):
            train_expert(data, None, spec, ExpertConfig(epochs=5, lr=1e200), seed=0)


def test_desk_training_loss_decreases(desk):
    train, val = desk
    for seed in range(3):
        buf = train_expert(train, None, DESK, ExpertConfig(), seed=seed)
        first = numpy_loss_and_grads(buf.checkpoints[0].arrays(), train.features, train.labels)[0]
        last = numpy_loss_and_grads(buf.checkpoints[-1].arrays(), train.features, train.labels)[0]
        assert last < first


def test_desk_accuracy_reaches_bayes_ceiling(desk):
    train, val = desk
    ceiling = bayes_accuracy(val, 1)
    # the blob overlap caps any classifier well below 0.90 at this spread
    assert ceiling < 0.90
    oscillates = False
    for seed in range(10):
        buf = train_expert(train, val, DESK, ExpertConfig(), seed=seed)
        assert buf.val_accuracy[-1] >= ceiling - 0.03
        oscillates |= bool(np.any(np.diff(buf.val_accuracy) < 0))
    assert oscillates


def test_ensemble(small):
    data, spec = small
    cfg = ExpertConfig(epochs=2, batch_size=10, num_experts=3, base_seed=7)
    bufs = train_expert_ensemble(data, None, spec, cfg, workers=1)
    assert len(bufs) == 3
    firsts = [b.checkpoints[0].flatten() for b in bufs]
    assert not np.array_equal(firsts[0], firsts[1]) and not np.array_equal(firsts[1], firsts[2])
    assert encode_buffer(bufs[1]) == encode_buffer(train_expert(data, None, spec, cfg, seed=8))
    again = train_expert_ensemble(data, None, spec, cfg, workers=2)
    assert [encode_buffer(b) for b in again] == [encode_buffer(b) for b in bufs]


def test_ensemble_error_has_index(small):
    data, spec = small
    with pytest.raises(ExpertError, match="expert 0"), np.errstate(all="ignore"):
        train_expert_ensemble(data, None, spec, ExpertConfig(epochs=2, lr=1e200, num_experts=2), workers=1)


def test_default_workers(monkeypatch):
    monkeypatch.delenv("MCTDISTILL_THREADS", raising=False)
    assert default_workers() == 1
    monkeypatch.setenv("MCTDISTILL_THREADS", "3")
    assert default_workers() == 3


@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs at least 4 CPUs")
def test_parallel_speedup(desk):
    train, val = desk
    cfg = ExpertConfig(epochs=10, num_experts=8)
    t0 = time.perf_counter()
    train_expert_ensemble(train, None, DESK, cfg, workers=1)
    serial = time.perf_counter() - t0
    t0 = time.perf_counter()
    train_expert_ensemble(train, None, DESK, cfg, workers=4)
    assert time.perf_counter() - t0 < 0.5 * serial
