import numpy as np
import pytest
from helpers import kernel_subscales, random_step_fields, uncondensed_subscales, wall_space
from hypothesis import given, settings
from hypothesis import strategies as st

from vmsflow.errors import ConfigError, DataError, NumericalError
from vmsflow.exact import CAVITY, OSEEN_BUMP
from vmsflow.forms import (FluidParams, NavierStokesSystem, OseenSystem, StabilizationConfig, StepData,
                           condensed_subscale_update, convection_forms, momentum_residual, quasi_static_subscale,
                           stokes_projector, tau_C, tau_M_dynamic, tau_M_quasistatic)
from vmsflow.oseen import OseenCase, reduced_form
from vmsflow.spaces import NO_SLIP, PERIODIC, BoundarySpec, Mesh, build_space, solenoidal_projection

G01 = np.array([100.0, 100.0])


def test_tau_dynamic_viscous_limit():
    assert tau_M_dynamic(np.zeros(2), 0.01, G01, 36.0) == pytest.approx(0.0196419, abs=5e-8)


def test_tau_dynamic_advective_limit():
    assert tau_M_dynamic(np.array([2.0, 0.0]), 0.0, G01) == pytest.approx(0.1 / 2.0)


def test_tau_quasistatic_example():
    dyn = tau_M_dynamic(np.zeros(2), 0.01, G01, 36.0)
    qs = tau_M_quasistatic(np.zeros(2), 0.01, G01, 36.0, 0.05)
    assert qs == pytest.approx((1600 + dyn ** -2) ** -0.5, rel=1e-14)
    assert qs == pytest.approx(0.0154451, abs=5e-8)


def test_tau_quasistatic_limits():
    assert tau_M_quasistatic(np.zeros(2), 0.0, G01, 36.0, 0.3) == pytest.approx(0.15)
    u = np.array([0.3, -1.2])
    assert tau_M_quasistatic(u, 0.01, G01, 36.0, 1e9) == pytest.approx(tau_M_dynamic(u, 0.01, G01), rel=1e-12)


def test_tau_accepts_full_metric_matrix():
    assert tau_M_dynamic(np.zeros(2), 0.01, np.diag(G01)) == pytest.approx(tau_M_dynamic(np.zeros(2), 0.01, G01))


def test_tau_degenerate_raises():
    with pytest.raises(ConfigError):
        tau_M_dynamic(np.zeros(2), 0.0, G01)


def test_tau_c_example_and_zero_rule():
    assert tau_C(0.02, G01) == pytest.approx(0.25)
    assert tau_C(0.02, G01, "zero") == 0.0


@settings(max_examples=50, deadline=None)
@given(u=st.lists(st.floats(-10, 10), min_size=2, max_size=2), nu=st.floats(1e-6, 1.0),
       scale=st.floats(1.0, 3.0), i=st.integers(0, 1))
def test_tau_monotone(u, nu, scale, i):
    u = np.array(u)
    t = tau_M_dynamic(u, nu, G01)
    assert tau_M_dynamic(u, nu * scale, G01) <= t * (1 + 1e-14)
    v = u.copy()
    v[i] *= scale
    assert tau_M_dynamic(v, nu, G01) <= t * (1 + 1e-14)


def test_condensed_update_example():
    up, K = condensed_subscale_update(np.array([1.0, 0.0]), np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2),
                                      np.array([0.0, 1.0]), np.array(0.05), 0.1)
    assert up == pytest.approx([0.334444, -0.033333], abs=1e-6)
    assert np.allclose(np.linalg.inv(K), [[3.0, 0.1], [0.0, 3.0]])


def test_condensed_update_rejects_singular_matrix():
    # 1/dt + 1/tau + grad a = 0 on the first component
    g = np.array([[-30.0, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericalError):
        condensed_subscale_update(np.zeros(2), g, np.zeros(2), np.ones(2), np.array(0.05), 0.1)


@pytest.mark.parametrize("k_prime", [1, 2])
@pytest.mark.parametrize("theta", [1.0, 0.5])
def test_condensation_matches_uncondensed_system(k_prime, theta):
    rng = np.random.default_rng(7)
    space = wall_space(2, k_prime)
    f = random_step_fields(space, rng, 0.01, 0.1, theta)
    ref = uncondensed_subscales(f["a_grad"], f["tau"], f["grad_pp"], f["r_M"], f["up_old"], 0.1, theta)
    assert np.max(np.abs(kernel_subscales(space, f, 0.01, 0.1, theta) - ref)) <= 1e-12
    cs, _ = condensed_subscale_update(f["up_old"], f["a_grad"], f["grad_pp"], f["r_M"], f["tau"], 0.1, theta)
    assert np.max(np.abs(cs - ref)) <= 1e-12


def test_quasi_static_subscale():
    up = quasi_static_subscale(np.array([[1.0, 2.0]]), np.array([[0.5, 0.0]]), np.array([0.1]))
    assert np.allclose(up, [[-0.15, -0.2]])


def test_residual_of_zero_state_is_minus_source():
    f = np.array([[1.0, -2.0]])
    z = np.zeros((1, 2))
    assert np.allclose(momentum_residual(z, np.zeros((1, 2, 2)), np.zeros((1, 2, 2, 2)), z, z, f, 0.3), -f)


def test_manufactured_residual_vanishes():
    rng = np.random.default_rng(1)
    x = rng.random((20, 2))
    nu = 0.01
    r = momentum_residual(CAVITY.velocity(x), CAVITY.grad(x), CAVITY.hessian(x), np.zeros((20, 2)),
                          CAVITY.pressure_grad(x), CAVITY.navier_stokes_source(nu)(x), nu)
    assert np.max(np.abs(r)) <= 1e-12


def test_convection_forms_skew_symmetry():
    rng = np.random.default_rng(2)
    a, u, v = (rng.standard_normal((5, 2)) for _ in range(3))
    gu, gv = rng.standard_normal((5, 2, 2)), rng.standard_normal((5, 2, 2))
    w = np.ones(5)
    assert convection_forms(a, u, gu, u, gu, w, "skew") == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        convection_forms(a, u, gu, v, gv, w, "upwind")


def test_newton_jacobian_matches_finite_differences():
    space = build_space(Mesh.uniform(2, 3), 1, BoundarySpec.uniform(2, NO_SLIP))
    system = NavierStokesSystem(space, FluidParams(0.05, OSEEN_BUMP.navier_stokes_source(0.05)),
                                StabilizationConfig(model="dynamic"), theta=0.5)
    rng = np.random.default_rng(4)
    x_old = np.zeros(space.size)
    x_old[space.free] = rng.standard_normal(space.free.size)
    q = space.quadrature()
    step = StepData(x_old, 0.1 * rng.standard_normal((q.n_cells, q.nq, 2)), 0.0, 0.1)
    x = x_old.copy()
    x[space.free] += 0.1 * rng.standard_normal(space.free.size)
    A, R, _ = system.linearize(x, step)
    dx = np.zeros(space.size)
    dx[space.free] = rng.standard_normal(space.free.size)
    e = 1e-6
    Rp, _ = system.residual(x + e * dx, step, tau_from=x)
    Rm, _ = system.residual(x - e * dx, step, tau_from=x)
    fd = (Rp - Rm) / (2 * e)
    assert np.linalg.norm(fd - A @ dx[space.free]) <= 1e-6 * np.linalg.norm(fd)


@pytest.mark.parametrize("k_prime", [1, 2])
def test_oseen_operator_matches_reduced_form(k_prime):
    # assembled bilinear form vs an independent quadrature of the reduced form
    case = OseenCase(0.01, (1.0, 0.5))
    space = case.space(4, k_prime)
    system = OseenSystem(space, case.nu, np.asarray(case.a), lambda x, t=0.0: np.zeros(x.shape),
                         StabilizationConfig())
    d = system.data()
    rng = np.random.default_rng(5)

    def random_pair():
        x = np.zeros(space.size)
        x[: space.n_velocity] = solenoidal_projection(space, rng.standard_normal(space.n_velocity))
        b = space.layout.block("pp")
        x[b] = rng.standard_normal(b.stop - b.start)
        return x

    x, y = random_pair(), random_pair()
    local, _ = system.op.residual(x, d, {"nu": case.nu})
    bilinear = y @ system.op.full_residual(local)
    ref = reduced_form(space, x, y, case.a, case.nu, d["tau"], d["tau_c"])
    assert bilinear == pytest.approx(ref, rel=1e-10)


def test_oseen_rejects_divergent_advection():
    space = OseenCase(0.01, (1.0, 0.0)).space(3, 1)
    with pytest.raises(DataError):
        OseenSystem(space, 0.01, lambda x: np.stack([x[..., 0], 0 * x[..., 0]], -1), lambda x, t=0.0: 0 * x,
                    advection_grad=lambda x: np.broadcast_to(np.array([[1.0, 0.0], [0.0, 0.0]]), x.shape + (2,)))


def test_stokes_projector_is_idempotent():
    space = build_space(Mesh.uniform(2, 4, (0, 2 * np.pi)), 1, BoundarySpec.periodic(2))
    from vmsflow.exact import TaylorGreen2D
    tg = TaylorGreen2D(0.01)
    x = stokes_projector(space, (tg.velocity, tg.grad, tg.pressure), nu=0.01)
    y = stokes_projector(space, x, nu=0.01)
    nv = space.n_velocity
    assert np.max(np.abs(y[:nv] - x[:nv])) <= 1e-10


def test_steady_model_choice():
    space = build_space(Mesh.uniform(2, 3), 1, BoundarySpec.uniform(2, NO_SLIP))
    s = NavierStokesSystem(space, FluidParams(0.1), StabilizationConfig(model="dynamic"), steady=True)
    assert s.model == "quasi-static"
    with pytest.raises(ConfigError):
        NavierStokesSystem(space, FluidParams(0.1), theta=0.3)
    with pytest.raises(ConfigError):
        FluidParams(0.0)
    with pytest.raises(ConfigError):
        StabilizationConfig(model="smagorinsky")
