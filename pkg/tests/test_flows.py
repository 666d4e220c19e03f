import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfnpcdr import flows
from nfnpcdr.flows import (
    CouplingStep,
    FlowNumericError,
    FlowStack,
    PlanarStep,
    RadialStep,
    SingularJacobianWarning,
    apply_flow,
    invert_coupling,
    log_det_step,
    numeric_jacobian_logdet,
)
from nfnpcdr.numkernel import grad_check, no_grad
from nfnpcdr.numkernel import tensor as T


def raw_u_for(u_hat):
    """Raw u giving effective direction ``u_hat`` on a 1-d step with w = 1.

    With w = 1, u_hat = m(u) = -1 + margin + softplus(u).
    """
    return math.log(math.expm1(1.0 + u_hat - flows.PLANAR_MARGIN))


def planar_1d(u_hat, w=1.0, b=0.0):
    step = PlanarStep(1, np.random.default_rng(0), "p")
    step.u.data = np.array([raw_u_for(u_hat)])
    step.w.data = np.array([w])
    step.b.data = np.array(b)
    return step


def randomize(step, rng, scale=1.0):
    for p in step.params:
        p.data = rng.normal(0.0, scale, p.shape)
    return step


def random_step(family, dim, rng):
    if family == "planar":
        return randomize(PlanarStep(dim, rng, "s"), rng, 0.7)
    if family == "radial":
        return randomize(RadialStep(dim, rng, "s"), rng, 1.0)
    return randomize(CouplingStep(dim, rng, "s", parity=int(rng.integers(2)), hidden=6), rng, 0.5)


def test_empty_stack_is_identity():
    z0 = np.random.default_rng(0).standard_normal((3, 4))
    res = apply_flow(FlowStack("none", []), z0)
    np.testing.assert_array_equal(res.z.data, z0)
    np.testing.assert_array_equal(res.sum_log_det.data, np.zeros(3))


def test_planar_zero_direction_is_identity():
    step = planar_1d(0.0)
    assert abs(float(step.u_hat().data[0])) < 1e-12
    z = np.array([[0.3], [-1.2]])
    z_new, log_det = step.forward(z)
    np.testing.assert_allclose(z_new.data, z, atol=1e-12)
    np.testing.assert_allclose(log_det.data, 0.0, atol=1e-12)
    assert abs(numeric_jacobian_logdet(step, np.array([0.3]))) <= 1e-8


def test_planar_hand_example():
    # d2 = 1, w = 1, b = 0, u_hat = 0.5, z0 = 0: det = 1 + 0.5 * tanh'(0) * 1 = 1.5
    step = planar_1d(0.5)
    ld = float(log_det_step(step, np.array([0.0])).data)
    assert ld == pytest.approx(math.log(1.5), abs=1e-12)
    assert numeric_jacobian_logdet(step, np.array([0.0])) == pytest.approx(math.log(1.5), abs=1e-9)


def test_coupling_zero_scale_is_volume_preserving():
    step = randomize(CouplingStep(4, np.random.default_rng(1), "c", hidden=5), np.random.default_rng(2))
    for p in step.scale_net.params:
        p.data[...] = 0.0
    z = np.random.default_rng(3).standard_normal((6, 4))
    np.testing.assert_array_equal(log_det_step(step, z).data, np.zeros(6))


def test_coupling_shift_does_not_change_volume():
    rng = np.random.default_rng(4)
    step = random_step("coupling", 4, rng)
    z = rng.standard_normal(4)
    before = numeric_jacobian_logdet(step, z)
    for p in step.shift_net.params[-2:]:
        p.data = 2.0 * p.data
    assert numeric_jacobian_logdet(step, z) == pytest.approx(before, abs=1e-8)


@pytest.mark.parametrize("family", ["planar", "radial", "coupling"])
@pytest.mark.parametrize("dim", [2, 8])
def test_log_det_matches_numeric(family, dim):
    rng = np.random.default_rng(100 + dim)
    worst = 0.0
    for _ in range(30):
        step = random_step(family, dim, rng)
        z = rng.standard_normal(dim) * 1.5
        a = float(log_det_step(step, z).data)
        worst = max(worst, abs(a - numeric_jacobian_logdet(step, z)))
    assert worst <= 1e-6


def test_coupling_zero_networks_invert_trivially():
    step = CouplingStep(4, np.random.default_rng(0), "c", hidden=5)
    for p in step.params:
        p.data[...] = 0.0
    z = np.random.default_rng(1).standard_normal((5, 4))
    np.testing.assert_array_equal(invert_coupling(step, z), z)


def test_coupling_round_trip():
    rng = np.random.default_rng(7)
    step = random_step("coupling", 6, rng)
    z = rng.standard_normal((100, 6)) * 2.0
    with no_grad():
        out = step.forward(z)[0].data
        back = step.forward(invert_coupling(step, out))[0].data
    assert np.max(np.abs(back - out)) <= 1e-10
    assert np.max(np.abs(invert_coupling(step, out) - z)) <= 1e-10


def test_complementary_masks_compose():
    rng = np.random.default_rng(8)
    a = randomize(CouplingStep(5, rng, "a", parity=0, hidden=4), rng, 0.5)
    b = randomize(CouplingStep(5, rng, "b", parity=1, hidden=4), rng, 0.5)
    assert np.all(a.mask + b.mask == 1.0)
    z = rng.standard_normal((20, 5))
    res = apply_flow(FlowStack("coupling", [a, b]), z)
    back = invert_coupling(a, invert_coupling(b, res.z.data))
    assert np.max(np.abs(back - z)) <= 1e-10


def test_coupling_change_of_variables():
    rng = np.random.default_rng(9)
    stack = FlowStack("coupling", [random_step("coupling", 4, rng) for _ in range(3)])
    z0 = rng.standard_normal((10, 4))
    res = apply_flow(stack, z0)

    def log_q0(z):
        return -0.5 * np.sum(z * z + math.log(2 * math.pi), axis=-1)

    forward = log_q0(z0) - res.sum_log_det.data
    z = res.z.data
    for step in reversed(stack.steps):
        z = invert_coupling(step, z)
    again = apply_flow(stack, z)
    np.testing.assert_allclose(log_q0(z) - again.sum_log_det.data, forward, atol=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
       st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_planar_constraint_adversarial(u, w):
    step = PlanarStep(3, np.random.default_rng(0), "p")
    step.u.data, step.w.data = np.array(u), np.array(w)
    u_hat, w_dot = step.direction()
    assert float(w_dot.data) >= -1.0 + 1e-7
    # the closed form agrees with the explicit dot product up to rounding
    norm = np.linalg.norm
    scale = 1.0 + float(norm(step.w.data) * (norm(step.u.data) + norm(u_hat.data)))
    assert abs(float(np.dot(step.w.data, u_hat.data)) - float(w_dot.data)) <= 1e-12 * scale


def test_planar_constraint_very_negative():
    step = PlanarStep(2, np.random.default_rng(0), "p")
    step.w.data = np.array([1.0, 0.0])
    step.u.data = np.array([-1e9, 3.0])
    assert float(np.dot(step.w.data, step.u_hat().data)) >= -1.0 + 1e-7
    z_new, log_det = step.forward(np.zeros((1, 2)))
    assert np.isfinite(log_det.data).all()


def test_radial_coefficients_valid():
    rng = np.random.default_rng(10)
    for _ in range(50):
        step = randomize(RadialStep(3, rng, "r"), rng, 5.0)
        alpha, beta = step.coefficients()
        assert float(alpha.data) > 0.0
        assert float(beta.data) >= -float(alpha.data)


@pytest.mark.parametrize("family", ["planar", "radial", "coupling"])
def test_log_det_gradients(family):
    rng = np.random.default_rng(11)
    stack = FlowStack(family, [random_step(family, 3, rng) for _ in range(2)])
    z0 = rng.standard_normal((4, 3))
    assert grad_check(lambda: apply_flow(stack, z0).sum_log_det.sum(), stack.params) <= 1e-5


def test_flow_output_gradients():
    rng = np.random.default_rng(12)
    stack = FlowStack.build("planar", 3, 4, rng)
    for s in stack.steps:
        randomize(s, rng, 0.7)
    w = rng.standard_normal((5, 4))
    z0 = rng.standard_normal((5, 4))
    loss = lambda: T.mul(apply_flow(stack, z0).z, w).sum()
    assert grad_check(loss, stack.params) <= 1e-6


def test_nonfinite_names_step():
    stack = FlowStack.build("planar", 3, 2, np.random.default_rng(0))
    stack.steps[1].b.data = np.array(np.nan)
    with pytest.raises(FlowNumericError, match="step 1") as info:
        apply_flow(stack, np.zeros((1, 2)))
    assert info.value.step == 1


def test_singular_step_raises():
    # radial with beta = -alpha collapses everything onto z_ref's sphere at r -> 0
    step = RadialStep(2, np.random.default_rng(0), "r")
    step.beta_raw.data = np.array(-800.0)
    with pytest.raises(FlowNumericError):
        apply_flow(FlowStack("radial", [step]), step.z_ref.data[None, :] + 1e-14)


def test_numeric_jacobian_flags_singularity():
    # beta = -alpha maps a neighbourhood of z_ref onto z_ref to first order
    step = RadialStep(8, np.random.default_rng(0), "r")
    step.beta_raw.data = np.array(-800.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        value = numeric_jacobian_logdet(step, step.z_ref.data.copy())
    assert value < math.log(1e-12)
    assert any(issubclass(w.category, SingularJacobianWarning) for w in caught)


def test_numeric_jacobian_step_size_bounds():
    with pytest.raises(ValueError):
        numeric_jacobian_logdet(planar_1d(0.1), np.zeros(1), h=1e-3)


def test_stack_validation():
    with pytest.raises(ValueError):
        FlowStack("spline", [])
    with pytest.raises(ValueError):
        FlowStack("planar", [RadialStep(2, np.random.default_rng(0), "r")])
    with pytest.raises(ValueError):
        flows.coupling_mask(1, 0)
    assert len(FlowStack.build("radial", 0, 4, np.random.default_rng(0))) == 0
