import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from fino.flow import (
    FlowBatch,
    NoiseSchedule,
    TargetMode,
    VectorFieldNet,
    canonical_flow,
    conditional_variance,
    fino_loss,
    flow_target,
    flow_matching_loss,
    integrate,
    interpolate,
    perturbed_flow,
    sample_action,
    schedule_sigma,
)
from fino.nn import ContractError, DenseNet
from oracles import central_difference, max_relative_error

QUAD = "quadratic"
SHIFT = "shifted_exponential"


def constant_field(state_dim, action_dim, c):
    net = VectorFieldNet(state_dim, action_dim, hidden=(4,))
    net.net.flat[...] = 0.0
    net.net.biases[-1][...] = c
    return net


def linear_field(action_dim, a_matrix, state_dim=1):
    """Single-layer field v = A x (ignores t and s)."""
    dense = DenseNet([1 + state_dim + action_dim, action_dim])
    dense.flat[...] = 0.0
    dense.weights[0][1 + state_dim:, :] = np.asarray(a_matrix).T
    return VectorFieldNet(state_dim, action_dim, net=dense)


# -- schedule ---------------------------------------------------------------

def test_quadratic_boundaries():
    s = NoiseSchedule(0.1, variant=QUAD)
    assert schedule_sigma(s, 0.0) == 0.0
    assert schedule_sigma(s, 1.0) == pytest.approx(0.1, abs=1e-15)
    assert s.variance(1.0) == pytest.approx(0.01, abs=1e-15)


def test_quadratic_midpoint():
    # (0.01 - 0.2) * 0.25 + 0.2 * 0.5 = 0.0525
    assert schedule_sigma(NoiseSchedule(0.1, variant=QUAD), 0.5) == pytest.approx(0.229128784747792, rel=1e-12)


def test_shifted_exponential_values():
    s = NoiseSchedule(0.1, variant=SHIFT)
    assert schedule_sigma(s, 0.0) == pytest.approx(6.737946999085467e-4, rel=1e-12)
    assert schedule_sigma(s, 1.0) == pytest.approx(0.1, rel=1e-15)


def test_schedule_rejects_bad_time_and_eta():
    with pytest.raises(ContractError):
        schedule_sigma(NoiseSchedule(0.1), 1.5)
    with pytest.raises(ContractError):
        schedule_sigma(NoiseSchedule(0.1), -0.01)
    with pytest.raises(ContractError):
        NoiseSchedule(1.2)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_schedule_identity(t, eta):
    s = NoiseSchedule(eta, variant=QUAD)
    assert s.variance(t) >= 0
    assert abs((1 - t) ** 2 + s.variance(t) - (1 - (1 - eta) * t) ** 2) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0.001, 1), st.floats(0, 1), st.floats(0, 1))
def test_conditional_variance_monotone_in_eta(t, e1, e2):
    lo, hi = sorted((e1, e2))
    assert conditional_variance(lo, t) <= conditional_variance(hi, t) + 1e-15


# -- paths ----------------------------------------------------------------------

def test_interpolate():
    x0, x1 = np.array([0.3, -2.0]), np.array([1.0, 4.0])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_allclose(interpolate([0, 0], [2, 2], 0.5), [1, 1])
    with pytest.raises(ContractError):
        interpolate([0, 0], [1, 1, 1], 0.5)


def test_perturbed_flow_cases():
    x0, xi = np.array([0.2, 0.4]), np.array([-1.0, 1.0])
    np.testing.assert_array_equal(perturbed_flow(x0, xi, 0.3, np.zeros(2)), interpolate(x0, xi, 0.3))
    e = np.array([0.05, -0.02])
    np.testing.assert_allclose(perturbed_flow(x0, xi, 1.0, e), xi + e)


def test_perturbed_flow_variance_monte_carlo():
    rng = np.random.default_rng(0)
    n, eta, t = 10**6, 0.1, 0.6
    sched = NoiseSchedule(eta, variant=QUAD)
    x0 = rng.standard_normal(n)
    eps = rng.standard_normal(n) * schedule_sigma(sched, t)
    x = perturbed_flow(x0[:, None], np.zeros((n, 1)), t, eps[:, None])[:, 0]
    target = (1 - (1 - eta) * t) ** 2
    # sd of a sample variance of normals is var*sqrt(2/n) ~ 0.0014 * var
    assert abs(x.var() - target) < 0.01 * target


def test_canonical_flow():
    x0, xi = np.array([0.7, -0.1]), np.array([0.3, 0.9])
    np.testing.assert_allclose(canonical_flow(x0, xi, 0.4, 0.0), interpolate(x0, xi, 0.4))
    np.testing.assert_allclose(canonical_flow(x0, xi, 1.0, 0.1), xi + 0.1 * x0)
    np.testing.assert_allclose(canonical_flow([1.0], [0.0], 0.5, 0.1), [0.55])


# -- losses -----------------------------------------------------------------------

def test_fino_loss_zero_on_exact_fit():
    c = np.array([0.5, -0.25])
    x0 = np.random.default_rng(0).standard_normal((6, 2))
    batch = FlowBatch(x0=x0, x1=x0 + c, s=np.zeros((6, 1)), t=np.linspace(0, 1, 6), eps=np.zeros((6, 2)))
    g = fino_loss(constant_field(1, 2, c), batch, NoiseSchedule(0.0), TargetMode.PLAIN)
    assert g.loss == pytest.approx(0.0, abs=1e-24)


def test_fino_loss_unit_example():
    batch = FlowBatch(x0=np.zeros((1, 2)), x1=np.array([[1.0, 0.0]]), s=np.zeros((1, 1)),
                      t=np.array([0.3]), eps=np.zeros((1, 2)))
    g = fino_loss(constant_field(1, 2, 0.0), batch, NoiseSchedule(0.1), TargetMode.PLAIN)
    assert g.loss == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("mode,variant", [("plain", SHIFT), ("exact", QUAD)])
def test_fino_loss_gradient_finite_differences(mode, variant):
    rng = np.random.default_rng(3)
    sched = NoiseSchedule(0.1, variant=variant)
    net = VectorFieldNet(3, 2, hidden=(16, 16), seed=1)
    batch = FlowBatch.draw(rng.standard_normal((9, 3)), rng.uniform(-1, 1, (9, 2)), sched, rng)
    g = fino_loss(net, batch, sched, mode)
    numeric = central_difference(lambda: fino_loss(net, batch, sched, mode).loss, net.net.params)
    assert max_relative_error(g.grads, numeric) < 1e-4


def test_fino_loss_reduces_to_flow_matching(rng):
    net = VectorFieldNet(2, 2, hidden=(8,), seed=0)
    batch = FlowBatch.draw(rng.standard_normal((12, 2)), rng.uniform(-1, 1, (12, 2)), NoiseSchedule(0.0), rng)
    assert np.all(batch.eps == 0)
    a = fino_loss(net, batch, NoiseSchedule(0.0), TargetMode.PLAIN)
    b = flow_matching_loss(net, batch)
    # direct evaluation of the behaviour-cloning objective
    xt = (1 - batch.t[:, None]) * batch.x0 + batch.t[:, None] * batch.x1
    pred = net(batch.t, batch.s, xt)
    direct = np.mean(np.sum((pred - (batch.x1 - batch.x0)) ** 2, axis=1))
    assert a.loss == b.loss
    assert a.loss == pytest.approx(direct, rel=1e-12)
    for ga, gb in zip(a.grads, b.grads):
        np.testing.assert_array_equal(ga, gb)


def test_exact_target_uses_eta():
    net = constant_field(1, 1, 0.0)
    sched = NoiseSchedule(0.1, variant=QUAD)
    # t = 0: no schedule noise, target 0.5 - 0.9 * 2 = -1.3
    at0 = FlowBatch(np.array([[2.0]]), np.array([[0.5]]), np.zeros((1, 1)), np.array([0.0]), np.zeros((1, 1)))
    assert fino_loss(net, at0, sched, TargetMode.EXACT).loss == pytest.approx(1.69, rel=1e-12)
    assert fino_loss(net, at0, sched, TargetMode.PLAIN).loss == pytest.approx(2.25, rel=1e-12)
    # t = 0.5: x = 1.25, sigma = 0.55, velocity 0.5 - 0.9 * (1.25 - 0.25) / 0.55
    mid = FlowBatch(np.array([[2.0]]), np.array([[0.5]]), np.zeros((1, 1)), np.array([0.5]), np.zeros((1, 1)))
    v = 0.5 - 0.9 * 1.0 / 0.55
    assert fino_loss(net, mid, sched, TargetMode.EXACT).loss == pytest.approx(v * v, rel=1e-12)


@pytest.mark.parametrize("eta", [0.0, 0.1, 0.3])
def test_exact_target_is_gaussian_path_velocity(eta, rng):
    sched = NoiseSchedule(eta, variant=QUAD)
    b = FlowBatch.draw(rng.standard_normal((50, 1)), rng.uniform(-1, 1, (50, 2)), sched, rng)
    x = perturbed_flow(b.x0, b.x1, b.t, b.eps)
    t = b.t[:, None]
    sigma = 1 - (1 - eta) * t
    expected = b.x1 - (1 - eta) * (x - t * b.x1) / sigma
    np.testing.assert_allclose(flow_target(b, sched, TargetMode.EXACT), expected, rtol=1e-10, atol=1e-12)


def test_exact_target_matches_plain_without_noise(rng):
    b = FlowBatch.draw(rng.standard_normal((20, 1)), rng.uniform(-1, 1, (20, 2)), NoiseSchedule(0.0), rng)
    b.t[0] = 1.0
    np.testing.assert_allclose(flow_target(b, NoiseSchedule(0.0), TargetMode.EXACT),
                               flow_target(b, NoiseSchedule(0.0), TargetMode.PLAIN), atol=1e-14)


def test_flow_batch_noise_scale():
    rng = np.random.default_rng(0)
    n = 200_000
    sched = NoiseSchedule(0.3, variant=QUAD)
    b = FlowBatch.draw(np.zeros((n, 1)), np.zeros((n, 1)), sched, rng)
    ratio = b.eps[:, 0] / np.maximum(schedule_sigma(sched, b.t), 1e-300)
    assert 0 <= b.t.min() and b.t.max() <= 1
    assert abs(ratio.std() - 1) < 0.01


# -- sampling -----------------------------------------------------------------------

@pytest.mark.parametrize("steps", [1, 3, 10])
def test_constant_field_integrates_exactly(steps):
    c = np.array([0.3, -0.5])
    z = np.array([[0.1, 0.2], [0.9, -0.9]])
    out = sample_action(constant_field(2, 2, c), np.zeros(2), z, steps)
    np.testing.assert_allclose(out, np.clip(z + c, -1, 1), atol=1e-14)


def test_zero_field_returns_clamped_noise():
    z = np.array([1.7, -0.4])
    np.testing.assert_array_equal(sample_action(constant_field(1, 2, 0.0), np.zeros(1), z), [1.0, -0.4])


def test_euler_first_order_convergence():
    a_matrix = np.array([[-1.0, 0.5], [0.0, -0.3]])
    net = linear_field(2, a_matrix)
    z = np.array([[0.8, -0.6]])
    exact = (expm(a_matrix) @ z[0])
    errs = [np.linalg.norm(integrate(net, np.zeros(1), z, n)[0] - exact) for n in (10, 20, 40, 80)]
    for coarse, fine in zip(errs, errs[1:]):
        assert coarse / fine >= 1.9


def test_sample_action_stays_in_box(rng):
    net = VectorFieldNet(2, 3, hidden=(16,), seed=0)
    net.net.flat *= 10
    out = sample_action(net, rng.standard_normal((50, 2)), rng.standard_normal((50, 3)) * 5)
    assert np.all(np.abs(out) <= 1)


def test_sample_action_rejects_bad_args():
    net = constant_field(1, 2, 0.0)
    with pytest.raises(ContractError):
        sample_action(net, np.zeros(1), np.zeros(3))
    with pytest.raises(ContractError):
        sample_action(net, np.zeros(1), np.zeros(2), steps=0)
