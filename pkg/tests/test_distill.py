import numpy as np
import pytest
from scipy import stats

from mctdistill.autodiff import Tape, Tensor, finite_difference_check, grad
from mctdistill.distill import (
    DistillConfig,
    SyntheticDataset,
    decode_synthetic,
    distill,
    encode_synthetic,
    inner_unroll,
    init_synthetic,
    matching_loss,
    read_synthetic,
    reformulated_loss,
    sample_start,
    write_report_csv,
    write_synthetic,
)
from mctdistill.datasets import gen_blobs
from mctdistill.errors import ConfigError, DegenerateSegmentError, FormatError
from mctdistill.expert import ExpertConfig, MttBuffer, checkpoint_delta_norms, train_expert
from mctdistill.model import ModelSpec, ParamVector
from mctdistill.trajectory import convexify

from helpers import meta_loss, meta_problem, random_triple

ONE = ModelSpec(1, (), 1)


def scalar(v):
    return ParamVector(ONE, [np.array([[v]]), np.array([0.0])])


def test_loss_hand_values():
    start, target = scalar(0.0), scalar(2.0)
    assert matching_loss(scalar(1.0), target, start).item() == 0.25
    assert matching_loss(target, target, start).item() == 0.0
    assert matching_loss(start, target, start).item() == 1.0


def test_reformulated_hand_values():
    start, target = scalar(1.0), scalar(3.0)
    assert reformulated_loss(target, target, start).item() == 0.0
    # V_S = 2 V_T
    assert reformulated_loss(scalar(5.0), target, start).item() == 1.0


def test_loss_identity_and_scale_invariance():
    spec = ModelSpec(3, (5,), 2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        end, target, start = random_triple(spec, rng)
        a = matching_loss(end, target, start).item()
        b = reformulated_loss(end, target, start).item()
        assert abs(a - b) <= 1e-12 * abs(a)
        k = rng.uniform(0.1, 10)
        t = target.flatten()
        end_k = ParamVector.unflatten(spec, t + k * (end.flatten() - t))
        start_k = ParamVector.unflatten(spec, t + k * (start.flatten() - t))
        assert matching_loss(end_k, target, start_k).item() == pytest.approx(a, rel=1e-12)


def test_degenerate_denominator():
    p = scalar(1.0)
    with pytest.raises(DegenerateSegmentError, match="degenerate segment"):
        matching_loss(scalar(2.0), p, p)
    with pytest.raises(DegenerateSegmentError, match="degenerate segment"):
        reformulated_loss(scalar(2.0), p, p)


def test_loss_gradient_wrt_end():
    spec = ModelSpec(2, (3,), 2)
    end, target, start = random_triple(spec, np.random.default_rng(1))
    with Tape():
        g = grad(matching_loss(end, target, start), list(end.groups))
    denom = np.sum((start.flatten() - target.flatten()) ** 2)
    expected = 2 * (end.flatten() - target.flatten()) / denom
    np.testing.assert_allclose(np.concatenate([x.data.ravel() for x in g]), expected, rtol=1e-12)


def test_unroll_zero_alpha_is_identity():
    spec, start, _, X, y = meta_problem(3)
    with Tape():
        end = inner_unroll(start, Tensor(X), y, Tensor(0.0), 4)
    assert end.equals(start)


def test_unroll_rejects_zero_steps():
    spec, start, _, X, y = meta_problem()
    with Tape(), pytest.raises(ValueError):
        inner_unroll(start, Tensor(X), y, Tensor(0.1), 0)


@pytest.mark.parametrize("N", [1, 3])
def test_meta_gradients_match_fd(N):
    spec, start, target, X, y = meta_problem(5)
    assert finite_difference_check(lambda x: meta_loss(start, target, x, y, 0.05, N), X, h=1e-4) < 1e-4
    assert finite_difference_check(lambda a: meta_loss(start, target, X, y, a, N), np.array(0.05), h=1e-4) < 1e-4


def _buffer(values):
    ckpts = [ParamVector(ONE, [np.array([[v]]), np.array([v])]) for v in values]
    return MttBuffer(ONE, ckpts, checkpoint_delta_norms(ckpts))


def test_sample_start_zero_max_start():
    buf = _buffer([0, 1, 2, 3, 4])
    rng = np.random.default_rng(0)
    cfg = DistillConfig(mode="mtt", max_start_epoch=0)
    for _ in range(20):
        start, target, c = sample_start("mtt", buf, cfg, rng)
        assert c == 0 and start.equals(buf.checkpoints[0]) and target.equals(buf.checkpoints[2])
    traj = convexify(buf)
    start, _, c = sample_start("mct", traj, DistillConfig(max_start_epoch=0), rng)
    assert c == 0 and start.equals(buf.checkpoints[0])


def test_sample_start_target_clamped():
    buf = _buffer([0, 1, 2, 3])
    cfg = DistillConfig(mode="mtt", M=5, max_start_epoch=1)
    _, target, _ = sample_start("mtt", buf, cfg, np.random.default_rng(0))
    assert target.equals(buf.checkpoints[3])


def test_integer_sampling_flag():
    traj = convexify(_buffer(np.arange(11.0)))
    rng = np.random.default_rng(0)
    cs = [sample_start("mct", traj, DistillConfig(max_start_epoch=8, continuous_sampling=False), rng)[2] for _ in range(300)]
    assert all(float(c).is_integer() for c in cs)
    assert set(cs) == set(range(9))


def test_continuous_sampling_is_uniform():
    traj = convexify(_buffer(np.arange(11.0)))
    rng = np.random.default_rng(1)
    cfg = DistillConfig(max_start_epoch=8)
    cs = np.array([sample_start("mct", traj, cfg, rng)[2] for _ in range(10_000)])
    result = stats.kstest(cs, stats.uniform(loc=0, scale=8).cdf)
    # 1% critical value of the one-sample KS statistic for large n
    assert result.statistic < 1.628 / np.sqrt(cs.size)


def test_sample_start_resample_limit():
    with pytest.raises(DegenerateSegmentError, match="10"):
        sample_start("mtt", _buffer([1.0, 1.0, 1.0]), DistillConfig(mode="mtt", M=1), np.random.default_rng(0))


def test_sample_start_mode_mismatch():
    buf = _buffer([0, 1, 2])
    with pytest.raises(ValueError):
        sample_start("mct", buf, DistillConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_start("mtt", convexify(buf), DistillConfig(mode="mtt"), np.random.default_rng(0))


def test_config_validation():
    for kwargs in ({"mode": "x"}, {"M": 0}, {"N": 0}, {"ipc": 0}, {"max_start_epoch": -1}, {"eval_every": 0}):
        with pytest.raises(ValueError):
            DistillConfig(**kwargs)


@pytest.fixture(scope="module")
def small_run():
    real = gen_blobs(3, 40, 5, 0.5, 0)
    spec = ModelSpec(5, (8,), 3)
    experts = [train_expert(real, None, spec, ExpertConfig(epochs=6, batch_size=20, lr=0.1), seed=s) for s in range(2)]
    return real, spec, experts


def test_max_start_bound(small_run):
    real, _, experts = small_run
    with pytest.raises(ConfigError, match="K - M"):
        distill(experts, real, DistillConfig(max_start_epoch=5, M=2, outer_iters=1), expert_lr=0.1)


def test_zero_outer_lr_leaves_set_unchanged(small_run):
    real, _, experts = small_run
    cfg = DistillConfig(outer_lr_features=0, outer_lr_alpha=0, outer_iters=5, max_start_epoch=3, N=3)
    init = init_synthetic(real, 1, 0.1, 0)
    syn, report = distill(experts, real, cfg, expert_lr=0.1, synthetic=init)
    np.testing.assert_array_equal(syn.features, init.features)
    assert syn.alpha == init.alpha
    assert len(report.losses) == 5 and all(np.isfinite(report.losses))


@pytest.mark.parametrize("mode", ["mtt", "mct"])
def test_distill_deterministic_and_traces(small_run, mode):
    real, _, experts = small_run
    cfg = DistillConfig(mode=mode, outer_iters=7, eval_every=3, max_start_epoch=3, N=3, ipc=2, seed=4)
    calls = []

    def eval_fn(s):
        calls.append(s.alpha)
        return float(s.features.sum()), 0.0

    a, ra = distill(experts, real, cfg, expert_lr=0.1, eval_fn=eval_fn)
    b, rb = distill(experts, real, cfg, expert_lr=0.1)
    assert encode_synthetic(a) == encode_synthetic(b)
    assert ra.losses == rb.losses
    assert ra.eval_iterations == [0, 3, 6, 7]
    assert len(ra.losses) == len(ra.alphas) == len(ra.start_positions) == 7
    assert ra.alphas[0] == 0.1 and a.alpha > 0
    assert list(a.labels) == [0, 0, 1, 1, 2, 2]


def test_alpha_projection(small_run):
    real, _, experts = small_run
    cfg = DistillConfig(outer_iters=3, max_start_epoch=3, N=2, outer_lr_alpha=1e6)
    syn, report = distill(experts, real, cfg, expert_lr=0.1)
    assert syn.alpha >= 1e-6 and all(a >= 1e-6 for a in report.alphas)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_inner_error_has_iteration(small_run):
    real, _, experts = small_run
    cfg = DistillConfig(outer_iters=2, max_start_epoch=3, alpha_init=1e200, outer_lr_alpha=0)
    with pytest.raises(Exception, match="outer iteration 0"):
        distill(experts, real, cfg)


def test_synthetic_round_trip(tmp_path):
    syn = SyntheticDataset(np.random.default_rng(0).normal(size=(6, 3)), np.repeat(np.arange(3), 2), 0.07, 2, 3)
    write_synthetic(tmp_path / "s.synd", syn)
    back = read_synthetic(tmp_path / "s.synd")
    np.testing.assert_array_equal(back.features, syn.features)
    np.testing.assert_array_equal(back.labels, syn.labels)
    assert back.alpha == 0.07 and back.ipc == 2
    data = encode_synthetic(syn)
    assert data[:5] == b"SYND\x01"
    assert len(data) == 17 + 6 * 4 + 6 * 3 * 8 + 8
    with pytest.raises(FormatError, match="bad magic"):
        decode_synthetic(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="expected"):
        decode_synthetic(data[:-1])


def test_synthetic_invariants():
    with pytest.raises(ValueError):
        SyntheticDataset(np.zeros((2, 1)), np.array([1, 0]), 0.1, 1, 2)
    with pytest.raises(ValueError):
        SyntheticDataset(np.zeros((2, 1)), np.array([0, 1]), 0.0, 1, 2)


def test_report_csv(tmp_path, small_run):
    real, _, experts = small_run
    cfg = DistillConfig(outer_iters=4, eval_every=2, max_start_epoch=3, N=2)
    _, report = distill(experts, real, cfg, expert_lr=0.1, eval_fn=lambda s: (0.5, 0.0))
    write_report_csv(tmp_path / "r.csv", report)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,alpha_S,eval_accuracy"
    assert len(lines) == 1 + 5
    assert lines[1].endswith(",0.5") and lines[2].endswith(",")
    assert lines[-1].startswith("4,,")


def test_first_loss_envelope_on_desk():
    from mctdistill.datasets import desk_blobs
    from mctdistill.expert import train_expert_ensemble

    for seed in range(3):
        train, _ = desk_blobs(seed)
        experts = train_expert_ensemble(train, None, ModelSpec(16, (64, 64), 4), ExpertConfig(base_seed=seed), workers=1)
        for mode in ("mtt", "mct"):
            _, report = distill(experts, train, DistillConfig(mode=mode, outer_iters=1, seed=seed), expert_lr=0.05)
            assert np.isfinite(report.losses[0]) and report.losses[0] <= 10
