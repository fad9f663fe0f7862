import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

import cmpe.consistency as cm
from cmpe.consistency import (
    ConsistencyModel,
    ConsistencySchedule,
    c_out,
    c_skip,
    cmpe_loss_and_grads,
    cmpe_total_loss,
    cmpe_training_step,
    consistency_forward,
    consistency_jacobian,
    consistency_loss_given_noise,
    discretization_steps,
    multistep_sample,
    noise_index_probs,
    noise_scales,
    one_step_density,
    pseudo_huber,
    sample_noise_index,
    sampling_times,
    schedule_grid,
    time_grid,
)
from cmpe.errors import DegenerateMapError, DomainError, ScheduleError
from cmpe.estimator import load_estimator
from cmpe.nn import AdamW
from cmpe.simulators import Standardization
from helpers import SCHED, fd_gradients, linear_model, max_rel_error, small_model

# ------------------------------------------------------------ scalar formulas


def test_skip_boundary_values():
    assert float(c_skip(SCHED.eps, SCHED)) == 1.0
    assert float(c_out(SCHED.eps, SCHED)) == 0.0


def test_skip_substitution():
    sched = ConsistencySchedule(sigma_data=0.5)
    assert float(c_skip(sched.eps + 0.5, sched)) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize(
    "k,expected",
    [(0, 11), (99, 51)],
)
def test_discretization_examples(k, expected):
    assert discretization_steps(k, ConsistencySchedule(s0=10, s1=50, total_iterations=100)) == expected


def test_discretization_constant_when_s0_equals_s1():
    sched = ConsistencySchedule(s0=20, s1=20, total_iterations=50)
    assert {discretization_steps(k, sched) for k in range(50)} == {21}


def test_discretization_rejects_out_of_range():
    with pytest.raises(DomainError):
        discretization_steps(100, SCHED)


@given(
    s0=st.integers(1, 40),
    ratio=st.integers(1, 200),
    total=st.integers(1, 5000),
)
def test_discretization_monotone_and_bounded(s0, ratio, total):
    sched = ConsistencySchedule(s0=s0, s1=s0 * ratio, total_iterations=total)
    ks = sorted(set(np.linspace(0, total - 1, 60).astype(int)))
    n = [discretization_steps(k, sched) for k in ks]
    assert all(a <= b for a, b in zip(n, n[1:]))
    assert n[0] == s0 + 1
    assert max(n) <= sched.s1 + 1


def test_time_grid_linear_case():
    np.testing.assert_allclose(time_grid(5, 0.0, 1.0, 1.0), [0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)


@given(n=st.integers(2, 2000), eps=st.floats(1e-5, 0.1), t_max=st.floats(0.5, 100), rho=st.floats(1, 10))
def test_time_grid_endpoints_and_increasing(n, eps, t_max, rho):
    g = time_grid(n, eps, t_max, rho)
    assert g[0] == eps and g[-1] == t_max
    assert np.all(np.diff(g) > 0)


def test_noise_probs_normalized_and_two_point_grid():
    grid = schedule_grid(51, SCHED)
    p = noise_index_probs(grid, SCHED.p_mean, SCHED.p_std)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-14)
    two = schedule_grid(2, SCHED)
    assert set(sample_noise_index(two, SCHED, 0, size=100)) == {0}


def test_noise_probs_underflow_raises():
    with pytest.raises(ScheduleError):
        noise_index_probs(np.array([1e-300, 2e-300]), 50.0, 0.1)


def test_noise_index_frequencies():
    grid = schedule_grid(21, SCHED)
    p = noise_index_probs(grid, SCHED.p_mean, SCHED.p_std)
    n = 1_000_000
    counts = np.bincount(sample_noise_index(grid, SCHED, 7, size=n), minlength=p.size)
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 4 * sd + 1e-9)


@pytest.mark.parametrize(
    "u,v,c,expected",
    [([1.0, 2.0], [1.0, 2.0], 0.1, 0.0), ([3.0, 0.0], [0.0, 0.0], 4.0, 1.0)],
)
def test_pseudo_huber_examples(u, v, c, expected):
    assert float(pseudo_huber(np.array(u), np.array(v), c)) == pytest.approx(expected, abs=1e-15)


def test_pseudo_huber_small_c_limit():
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal((100, 3)), rng.standard_normal((100, 3))
    np.testing.assert_allclose(pseudo_huber(u, v, 1e-12), np.linalg.norm(u - v, axis=1), rtol=0, atol=1e-9)


@given(seed=st.integers(0, 10_000), c=st.floats(1e-6, 10))
def test_pseudo_huber_nonnegative_zero_iff_equal(seed, c):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    assert np.all(pseudo_huber(u, v, c) > 0)
    assert np.all(pseudo_huber(u, u, c) == 0)


def test_schedule_invariants():
    for bad in (dict(eps=0.0), dict(eps=20.0), dict(s0=60), dict(rho=0.5), dict(huber_c=0.0), dict(total_iterations=0)):
        with pytest.raises(ValueError):
            ConsistencySchedule(**bad)
    assert ConsistencySchedule.for_dim(4).huber_c == pytest.approx(0.00054 * 2)


# ------------------------------------------------------------ forward / jacobian


@given(seed=st.integers(0, 10_000))
def test_boundary_identity(seed):
    model = small_model(seed=seed % 5)
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((20, 2)) * 3
    cond = rng.standard_normal((20, 2))
    out = consistency_forward(model, theta, SCHED.eps, cond)
    np.testing.assert_array_equal(out, theta)


def test_zero_backbone_uses_skip_only():
    model = small_model()
    for w in model.backbone.weights:
        w[:] = 0
    theta = np.random.default_rng(1).standard_normal((4, 2))
    out = consistency_forward(model, theta, 2.0, np.zeros((1, 2)))
    np.testing.assert_allclose(out, float(c_skip(2.0, SCHED)) * theta, atol=1e-15)


def test_time_outside_range_rejected():
    model = small_model()
    with pytest.raises(DomainError):
        consistency_forward(model, np.zeros((1, 2)), SCHED.t_max * 1.01, np.zeros((1, 2)))
    with pytest.raises(DomainError):
        consistency_forward(model, np.zeros((1, 2)), SCHED.eps / 2, np.zeros((1, 2)))


def test_jacobian_matches_finite_differences():
    model = small_model(seed=3)
    rng = np.random.default_rng(3)
    theta, cond = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    _, jac = consistency_jacobian(model, theta, 1.7, cond)
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (consistency_forward(model, theta + e, 1.7, cond) - consistency_forward(model, theta - e, 1.7, cond)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, j], fd, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- training


def _batch(task, b, seed):
    rng = np.random.default_rng(seed)
    n_obs = 10 if task == "gmm" else 1
    return rng.standard_normal((b, 2)), rng.standard_normal((b, n_obs, 2))


def test_boundary_teacher_hand_evaluation():
    # s0 = s1 = 1 gives the two-point grid (eps, T): the teacher sits on the boundary
    sched = ConsistencySchedule(s0=1, s1=1, total_iterations=10)
    model = small_model(schedule=sched)
    for w in model.backbone.weights:
        w[:] = 0
    theta, x = _batch("two_moons", 6, 0)
    grid = schedule_grid(2, sched)
    idx = np.zeros(6, dtype=int)
    z = np.random.default_rng(1).standard_normal((6, 2))
    res = consistency_loss_given_noise(model, theta, x, grid, idx, z)
    # F = 0 so the student is c_skip(T) (theta + T z); the teacher is theta + eps z exactly
    a = float(c_skip(sched.t_max, sched))
    diff = a * (theta + sched.t_max * z) - (theta + sched.eps * z)
    d = np.sqrt(np.sum(diff**2, axis=1) + sched.huber_c**2) - sched.huber_c
    expected = np.mean(d / (sched.t_max - sched.eps))
    assert res.loss == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("task", ["two_moons", "gmm"])
def test_loss_invariant_to_batch_order(task):
    model = small_model(task)
    theta, x = _batch(task, 8, 2)
    grid = schedule_grid(11, SCHED)
    rng = np.random.default_rng(3)
    idx = rng.integers(0, 10, 8)
    z = rng.standard_normal((8, 2))
    perm = rng.permutation(8)
    a = consistency_loss_given_noise(model, theta, x, grid, idx, z)
    b = consistency_loss_given_noise(model, theta[perm], x[perm], grid, idx[perm], z[perm])
    assert a.loss == pytest.approx(b.loss, rel=1e-13)


@given(seed=st.integers(0, 10_000), k=st.integers(0, 99))
def test_loss_nonnegative(seed, k):
    model = small_model(seed=seed % 3, dropout=0.1)
    theta, x = _batch("two_moons", 5, seed)
    assert cmpe_loss_and_grads(model, theta, x, k, seed).loss >= 0


@pytest.mark.parametrize("task", ["two_moons", "gmm"])
def test_teacher_is_a_stop_gradient_copy(task):
    model = small_model(task, dropout=0.2)
    theta, x = _batch(task, 6, 4)
    default = cmpe_loss_and_grads(model, theta, x, 50, 9)
    frozen = cmpe_loss_and_grads(model, theta, x, 50, 9, teacher=model.copy())
    assert default.loss == frozen.loss
    for a, b in zip(default.grads, frozen.grads):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("task", ["two_moons", "gmm"])
@pytest.mark.parametrize("seed", range(3))
def test_training_gradients_match_finite_differences(task, seed):
    model = small_model(task, seed, dropout=0.1, l2=1e-3, widths=(5, 5))
    teacher = model.copy()
    theta, x = _batch(task, 4, seed)
    res = cmpe_loss_and_grads(model, theta, x, 60, seed, teacher=teacher)
    numeric = fd_gradients(lambda: cmpe_total_loss(model, theta, x, 60, seed, teacher=teacher), model.params())
    assert max_rel_error(res.grads, numeric) <= 1e-4


def test_training_step_reaches_summary_net():
    model = small_model("gmm")
    before = [p.copy() for p in model.summary.params()]
    opt = AdamW.for_params(model.params(), 1e-3, 10)
    theta, x = _batch("gmm", 8, 0)
    cmpe_training_step(model, opt, theta, x, 0, 0)
    assert any(not np.array_equal(a, b) for a, b in zip(before, model.summary.params()))


# ---------------------------------------------------------------- sampling


def test_sampling_grid_and_noise_scales():
    times = sampling_times(4, SCHED)
    np.testing.assert_array_equal(times, schedule_grid(5, SCHED))
    scales = noise_scales(4, SCHED)
    # pass j evaluates at times[-1 - j] and re-noises to times[-2 - j]
    expected = np.sqrt(times[:-1][::-1] ** 2 - SCHED.eps**2)
    np.testing.assert_allclose(scales, expected, rtol=0, atol=0)
    assert scales[-1] == 0.0
    with pytest.raises(DomainError):
        sampling_times(0, SCHED)


def test_one_step_sample_is_f_at_t_max():
    model = small_model(seed=2)
    x_obs = np.array([0.1, -0.2])
    draws = multistep_sample(model, x_obs, 1, 10, 5)
    # replay the first block's stream
    rng = np.random.default_rng([5, 0])
    theta_t = SCHED.t_max * rng.standard_normal((10, 2))
    expected = consistency_forward(model, theta_t, SCHED.t_max, model.condition_for(x_obs))
    np.testing.assert_array_equal(draws, expected)


def test_sampling_deterministic_and_block_consistent():
    model = small_model(seed=1)
    x_obs = np.zeros(2)
    a = multistep_sample(model, x_obs, 3, 2500, 11)
    b = multistep_sample(model, x_obs, 3, 2500, 11)
    np.testing.assert_array_equal(a, b)
    # the first block does not depend on how many draws follow it
    np.testing.assert_array_equal(multistep_sample(model, x_obs, 3, 1024, 11), a[:1024])
    with pytest.raises(DomainError):
        multistep_sample(model, x_obs, 0, 10, 0)


def test_two_step_gaussian_toy(monkeypatch):
    # exact consistency map for a N(0, 1) target under x_t = x + t z
    sched = SCHED

    def exact_f(model, theta_t, t, cond, train_mode=False, rng=None):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (theta_t.shape[0],))[:, None]
        return theta_t * np.sqrt((1 + sched.eps**2) / (1 + t**2)), None

    monkeypatch.setattr(cm, "_f_forward", exact_f)
    draws = multistep_sample(small_model(), np.zeros(2), 2, 20_000, 3)
    for j in range(2):
        assert stats.normaltest(draws[:, j]).pvalue > 0.01
        assert draws[:, j].std() == pytest.approx(1.0, rel=0.03)


# ------------------------------------------------------------------ density


@pytest.mark.parametrize("a", [0.37, 1.0, -2.5])
def test_one_step_density_linear_map(a):
    model = linear_model(a)
    draws, logp = one_step_density(model, np.zeros(2), 1000, 0)
    scale = abs(a) * SCHED.t_max
    expected = stats.norm(0, scale).logpdf(draws).sum(axis=1)
    np.testing.assert_allclose(logp, expected, rtol=0, atol=1e-8)


def test_one_step_density_identity_equals_latent():
    model = linear_model(1.0)
    draws, logp = one_step_density(model, np.zeros(2), 200, 1)
    latent = stats.multivariate_normal(np.zeros(2), SCHED.t_max**2 * np.eye(2)).logpdf(draws)
    np.testing.assert_allclose(logp, latent, atol=1e-10)


def test_one_step_density_destandardization():
    std = Standardization(np.array([1.0, -2.0]), np.array([2.0, 0.5]), np.zeros(2), np.ones(2))
    model = linear_model(0.6, std=std)
    draws, logp = one_step_density(model, np.zeros(2), 500, 2)
    sd = 0.6 * SCHED.t_max * std.theta_std
    expected = stats.norm(std.theta_mean, sd).logpdf(draws).sum(axis=1)
    np.testing.assert_allclose(logp, expected, atol=1e-8)


def test_one_step_density_degenerate_map():
    with pytest.raises(DegenerateMapError):
        one_step_density(linear_model(0.0), np.zeros(2), 10, 0)


def test_density_importance_weights_finite():
    # a trained-looking but arbitrary model: weights p/q must be finite and positive
    model = small_model(seed=4)
    draws, logp = one_step_density(model, np.zeros(2), 300, 0)
    logw = stats.norm(0, 1).logpdf(draws).sum(1) - logp
    w = np.exp(logw - logw.max())
    assert np.all(np.isfinite(logp)) and np.all(w > 0)


# --------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    model = small_model("gmm", seed=5)
    path = model.save(tmp_path / "m.json")
    back = load_estimator(path)
    assert isinstance(back, ConsistencyModel) and back.schedule == model.schedule
    back.save(tmp_path / "m2.json")
    assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()
    x = np.random.default_rng(0).standard_normal((10, 2))
    np.testing.assert_array_equal(multistep_sample(model, x, 2, 50, 1), multistep_sample(back, x, 2, 50, 1))
