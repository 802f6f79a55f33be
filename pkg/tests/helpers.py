"""Independent reference computations shared by the test modules."""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from vmsflow.forms import FluidParams, NavierStokesSystem, StabilizationConfig, StepData, momentum_residual, tau_m
from vmsflow.spaces import NO_SLIP, BoundarySpec, Mesh, build_space


def uncondensed_subscales(a_grad, tau, grad_pp, r_M, up_old, dt, theta):
    """Solve the time-discrete fine-scale momentum equation at all points as one sparse system.

    (u'_n - u'_o)/dt + (1/tau + grad a)(theta u'_n + (1 - theta) u'_o) = -(grad p' + r_M)
    """
    d = a_grad.shape[-1]
    npt = a_grad.reshape(-1, d, d).shape[0]
    G = a_grad.reshape(npt, d, d)
    t = tau.reshape(npt)
    L = np.eye(d)[None] / t[:, None, None] + G  # fine-scale operator
    lhs = np.eye(d)[None] / dt + theta * L
    rhs = (up_old.reshape(npt, d) / dt
           - (1 - theta) * np.einsum("pij,pj->pi", L, up_old.reshape(npt, d))
           - grad_pp.reshape(npt, d) - r_M.reshape(npt, d))
    A = sp.block_diag(list(lhs), format="csc")
    return spla.spsolve(A, rhs.ravel()).reshape(up_old.shape)


def random_step_fields(space, rng, nu, dt, theta, source=None):
    """Pointwise inputs of the subscale equation for random coarse states, computed with numpy."""
    q = space.quadrature()
    names = space.velocity_names
    x_old = rng.standard_normal(space.size)
    x_new = rng.standard_normal(space.size)
    up_old = rng.standard_normal((q.n_cells, q.nq, space.dim))
    u_o, g_o, h_o = q.velocity(x_old, names, 2)
    u_n, g_n, h_n = q.velocity(x_new, names, 2)
    a, ga, ha = (theta * n + (1 - theta) * o for n, o in ((u_n, u_o), (g_n, g_o), (h_n, h_o)))
    gp = q.evaluate("p", x_new, 1)[1]
    gpp = q.evaluate("pp", x_new, 1)[1]
    f = np.zeros_like(a) if source is None else source(q.x)
    r_M = momentum_residual(a, ga, ha, (u_n - u_o) / dt, gp, f, nu)
    tau = tau_m(np, a, nu, q.G[:, None, :], 36.0)
    return dict(x_old=x_old, x_new=x_new, up_old=up_old, a_grad=ga, tau=tau, grad_pp=gpp, r_M=r_M)


def wall_space(n=2, k_prime=1):
    return build_space(Mesh.uniform(2, n), k_prime, BoundarySpec.uniform(2, NO_SLIP))


def kernel_subscales(space, fields, nu, dt, theta):
    system = NavierStokesSystem(space, FluidParams(nu), StabilizationConfig(model="dynamic"), theta=theta)
    step = StepData(fields["x_old"], fields["up_old"], 0.0, dt)
    up_new, _ = system.subscales(fields["x_new"], step)
    return up_new


class RandomStreamFunction:
    """Smooth periodic solenoidal field ``curl psi`` from a few random Fourier modes on ``(0, L)^2``."""

    def __init__(self, rng, modes=3, length=2 * np.pi):
        self.k = 2 * np.pi / length
        self.terms = [(m, n, rng.standard_normal(), rng.uniform(0, 2 * np.pi))
                      for m in range(1, modes + 1) for n in range(1, modes + 1)]

    def _parts(self, x):
        X, Y = x[..., 0], x[..., 1]
        for m, n, amp, ph in self.terms:
            yield m * self.k, n * self.k, amp / (m * m + n * n), X, Y, ph

    def velocity(self, x):
        u = np.zeros(x.shape)
        for km, kn, c, X, Y, ph in self._parts(x):
            s = km * X + kn * Y + ph
            # psi = c sin(s): u = (dpsi/dy, -dpsi/dx)
            u[..., 0] += c * kn * np.cos(s)
            u[..., 1] -= c * km * np.cos(s)
        return u

    def grad(self, x):
        g = np.zeros(x.shape + (2,))
        for km, kn, c, X, Y, ph in self._parts(x):
            s = -c * np.sin(km * X + kn * Y + ph)
            g[..., 0, 0] += kn * km * s
            g[..., 0, 1] += kn * kn * s
            g[..., 1, 0] -= km * km * s
            g[..., 1, 1] -= km * kn * s
        return g
