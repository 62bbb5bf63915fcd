import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctdistill import autodiff as ad
from mctdistill.autodiff import Tape, Tensor, finite_difference_check, grad
from mctdistill.datasets import LabeledDataset, gen_blobs
from mctdistill.model import (
    ModelSpec,
    ParamVector,
    accuracy,
    forward_loss,
    init_params,
    numpy_loss_and_grads,
    sgd_step,
    train_full_batch,
)

SPEC = ModelSpec(5, (7, 6), 3)


def test_spec_layout():
    spec = ModelSpec(16, (64, 64), 4)
    assert spec.group_names == ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    assert spec.num_params == 16 * 64 + 64 + 64 * 64 + 64 + 64 * 4 + 4
    with pytest.raises(ValueError):
        ModelSpec(0, (3,), 2)


def test_init_biases_zero_and_deterministic():
    a, b = init_params(SPEC, 3), init_params(SPEC, 3)
    assert a.equals(b)
    for name, g in zip(a.names, a.groups):
        if name.endswith("bias"):
            assert not g.data.any()


def test_init_weight_mean():
    W = init_params(ModelSpec(128, (128,), 2), 0).groups[0].data
    limit = np.sqrt(6 / 256)
    se = limit / np.sqrt(3) / np.sqrt(W.size)  # std of U(-a,a) is a/sqrt(3)
    assert abs(W.mean()) < 3 * se
    assert W.min() >= -limit and W.max() <= limit


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_flatten_round_trip(seed):
    v = np.random.default_rng(seed).normal(size=SPEC.num_params)
    assert ParamVector.unflatten(SPEC, v).flatten().tobytes() == v.tobytes()


def test_zero_model_loss_is_ln2():
    spec = ModelSpec(3, (4,), 2)
    params = ParamVector(spec, [np.zeros(s) for s in spec.group_shapes])
    loss = forward_loss(params, np.ones((5, 3)), [0, 1, 0, 1, 1])
    assert loss.item() == pytest.approx(np.log(2), abs=1e-15)


def test_saturated_loss():
    spec = ModelSpec(1, (1,), 2)
    # hidden = relu(x), logits = [0, 50 * hidden]
    params = ParamVector(spec, [np.ones((1, 1)), np.zeros(1), np.array([[0.0, 50.0]]), np.zeros(2)])
    assert forward_loss(params, np.ones((1, 1)), [1]).item() < 1e-6


def test_label_out_of_range():
    with pytest.raises(ValueError, match="labels"):
        forward_loss(init_params(SPEC, 0), np.zeros((1, 5)), [3])


def test_input_gradient_matches_fd():
    params = init_params(SPEC, 1)
    labels = [0, 2, 1, 1]
    x0 = np.random.default_rng(2).normal(size=(4, 5))
    assert finite_difference_check(lambda x: forward_loss(params, x, labels), x0, 1e-5) < 1e-6


def test_tape_and_numpy_gradients_agree():
    rng = np.random.default_rng(5)
    params = init_params(SPEC, 4)
    X, y = rng.normal(size=(9, 5)), rng.integers(0, 3, size=9)
    loss_np, grads_np = numpy_loss_and_grads(params.arrays(), X, y)
    with Tape():
        loss = forward_loss(params, X, y)
        grads = grad(loss, list(params.groups))
    assert loss.item() == pytest.approx(loss_np, rel=1e-14)
    for a, b in zip(grads, grads_np):
        np.testing.assert_allclose(a.data, b, rtol=1e-12, atol=1e-15)


def test_sgd_step_definition():
    spec = ModelSpec(1, (), 1)  # a single weight and bias group
    params = ParamVector(spec, [np.array([[1.0]]), np.array([2.0])])
    out = sgd_step(params, [Tensor([[10.0]]), Tensor([-10.0])], 0.1)
    assert [g.data.ravel()[0] for g in out] == [0.0, 3.0]


def test_sgd_step_zero_lr_is_identity():
    params = init_params(SPEC, 0)
    grads = [Tensor(np.random.default_rng(1).normal(size=s)) for s in SPEC.group_shapes]
    assert sgd_step(params, grads, 0.0).flatten().tobytes() == params.flatten().tobytes()


def test_sgd_step_linear_in_lr():
    rng = np.random.default_rng(3)
    params = init_params(SPEC, 0)
    grads = [Tensor(rng.normal(size=s)) for s in SPEC.group_shapes]
    g = np.concatenate([t.data.ravel() for t in grads])
    for alpha in [1e-3, 0.1, 2.5]:
        diff = sgd_step(params, grads, alpha).flatten() - params.flatten()
        np.testing.assert_allclose(diff, -alpha * g, rtol=1e-12, atol=1e-15)


def test_sgd_step_lr_derivative():
    rng = np.random.default_rng(4)
    params = init_params(SPEC, 0)
    grads = [Tensor(rng.normal(size=s)) for s in SPEC.group_shapes]
    w = [Tensor(rng.normal(size=s)) for s in SPEC.group_shapes]

    def f(lr):
        out = sgd_step(params, grads, lr)
        total = ad.sum(ad.mul(out.groups[0], w[0]))
        for o, wi in zip(out.groups[1:], w[1:]):
            total = ad.add(total, ad.sum(ad.mul(o, wi)))
        return total

    with Tape():
        lr = Tensor(0.3)
        (d,) = grad(f(lr), [lr])
    expected = -sum(float(np.sum(g.data * wi.data)) for g, wi in zip(grads, w))
    assert d.item() == pytest.approx(expected, rel=1e-12)
    assert finite_difference_check(f, np.array(0.3), 1e-5) < 1e-6


def test_accuracy_tie_break_and_perfect():
    spec = ModelSpec(2, (3,), 2)
    const = ParamVector(spec, [np.zeros(s) for s in spec.group_shapes])
    ds = LabeledDataset(np.ones((4, 2)), np.array([0, 1, 0, 1]), 2)
    assert accuracy(const, ds) == 0.5

    blobs = gen_blobs(2, 20, 2, 1e-3, seed=7)
    trained = train_full_batch(init_params(spec, 0), blobs.features, blobs.labels, 0.5, 300)
    assert accuracy(trained, blobs) == 1.0


def test_random_init_accuracy_near_chance():
    ds = gen_blobs(4, 100, 16, 0.6, seed=0)
    spec = ModelSpec(16, (64, 64), 4)
    accs = [accuracy(init_params(spec, s), ds) for s in range(20)]
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_small_step_decreases_loss():
    rng = np.random.default_rng(9)
    for trial in range(50):
        params = init_params(SPEC, trial)
        X, y = rng.normal(size=(8, 5)), rng.integers(0, 3, size=8)
        before, grads = numpy_loss_and_grads(params.arrays(), X, y)
        after = forward_loss(sgd_step(params, [Tensor(g) for g in grads], 1e-4), X, y).item()
        assert after < before
