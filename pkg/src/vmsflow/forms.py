"""Weak forms of the VMS formulation with discretely divergence-free subscales.

Pointwise algebra (stabilization parameters, momentum residual, subscale
closures) is written once against an array namespace ``xp`` so the same code
serves numpy callers and the JAX cell kernels.  Cell kernels return the local
residual; their consistent Jacobian comes from ``jax.jacfwd`` with the
stabilization parameters held fixed at the current iterate.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DataError, NumericalError
from .quadrature import SparseAssembler, check_finite, field_derivatives, project_value_grad, tensor_basis, assemble_blocks
from .spaces import DivConformingSpace

jax.config.update("jax_enable_x64", True)

DYNAMIC = "dynamic"
QUASI_STATIC = "quasi-static"
NO_MODEL = "none"
MODELS = (DYNAMIC, QUASI_STATIC, NO_MODEL)


@dataclass(frozen=True)
class FluidParams:
    nu: float
    f: Optional[Callable] = field(default=None, compare=False)  # f(x, t) -> (..., d)

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigError(f"viscosity must be positive, got {self.nu}")

    def source(self, x, t):
        if self.f is None:
            return np.zeros(x.shape)
        return np.asarray(self.f(x, t), dtype=float)


@dataclass(frozen=True)
class StabilizationConfig:
    C_inv: float = 36.0
    model: str = QUASI_STATIC
    tau_C_rule: str = "standard"
    include_no_model_baseline: bool = False

    def __post_init__(self):
        if not self.C_inv > 0:
            raise ConfigError("C_inv must be positive")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}")
        if self.tau_C_rule not in ("standard", "zero"):
            raise ConfigError("tau_C_rule must be 'standard' or 'zero'")

    @property
    def effective_model(self):
        return NO_MODEL if self.include_no_model_baseline else self.model


# --- pointwise algebra ----------------------------------------------------


def _tau_denominator(xp, u, nu, G, C_inv):
    # G is diagonal on axis-aligned boxes: pass its diagonal (..., d)
    uGu = xp.sum(u * u * G, axis=-1)
    GG = xp.sum(G * G, axis=-1)
    return uGu + (C_inv * nu) ** 2 * GG


def tau_m(xp, u, nu, G, C_inv, dt=None):
    den = _tau_denominator(xp, u, nu, G, C_inv)
    if dt is not None:
        den = den + 4.0 / dt**2
    return 1.0 / xp.sqrt(den)


def _diag(G):
    G = np.asarray(G, dtype=float)
    if G.ndim >= 2 and G.shape[-1] == G.shape[-2]:
        if np.any(G - np.einsum("...ii->...i", G)[..., None] * np.eye(G.shape[-1]) != 0):
            raise ConfigError("only diagonal (axis-aligned) metrics are supported")
        return np.einsum("...ii->...i", G)
    return G


def tau_M_dynamic(u, nu, G, C_inv=36.0):
    """Momentum stabilization parameter without the time-step term."""
    u = np.asarray(u, dtype=float)
    g = _diag(G)
    den = _tau_denominator(np, u, nu, g, C_inv)
    if np.any(den <= 0):
        raise ConfigError("tau_M undefined for zero velocity and zero viscosity")
    return 1.0 / np.sqrt(den)


def tau_M_quasistatic(u, nu, G, C_inv, dt):
    return tau_m(np, np.asarray(u, dtype=float), nu, _diag(G), C_inv, dt)


def tau_C(tau_M, G, rule="standard"):
    """Grad-div coefficient ``1/(tau_M tr G)``, or zero."""
    if rule == "zero":
        return np.zeros_like(np.asarray(tau_M, dtype=float))
    trG = np.sum(_diag(G), axis=-1)
    return 1.0 / (np.asarray(tau_M) * trG)


def viscous_divergence(xp, hess, nu):
    """div(2 nu sym grad u) from the Hessian ``H[..., i, j, k] = d2 u_i / dx_j dx_k``."""
    lap = xp.einsum("...ijj->...i", hess)
    grad_div = xp.einsum("...jji->...i", hess)
    return nu * (lap + grad_div)


def strong_residual(xp, u, grad_u, hess_u, dudt, grad_p, f, nu):
    conv = xp.einsum("...ij,...j->...i", grad_u, u)
    return dudt + conv - viscous_divergence(xp, hess_u, nu) + grad_p - f


def momentum_residual(u, grad_u, hess_u, dudt, grad_p, f, nu):
    """Strong momentum residual at points; arrays shaped (..., d), (..., d, d), (..., d, d, d)."""
    return strong_residual(np, *(np.asarray(a, dtype=float) for a in (u, grad_u, hess_u, dudt, grad_p, f)), nu)


def condensed_matrix(xp, tau, grad_u, dt, theta=1.0):
    d = grad_u.shape[-1]
    eye = xp.eye(d)
    return (1.0 / dt + theta / tau)[..., None, None] * eye + theta * grad_u


def condensed_rhs(xp, uprime_old, tau, grad_u, grad_pprime, r_M, dt, theta=1.0):
    rhs = uprime_old / dt - grad_pprime - r_M
    if theta != 1.0:
        rhs = rhs - (1.0 - theta) * (
            uprime_old / tau[..., None] + xp.einsum("...ij,...j->...i", grad_u, uprime_old)
        )
    return rhs


def condensed_subscale_update(uprime_prev, grad_u, grad_pprime, r_M, tau_M, dt, theta=1.0, cond_max=1e12):
    """Statically condensed fine-scale velocity.

    With ``theta=1`` (backward Euler)::

        K = ((1 + dt/tau) I + dt grad u)^-1
        u'_n = K (u'_{n-1} - dt (grad p' + r_M))

    With ``theta=1/2`` (implicit midpoint) the fine-scale equation is taken
    at the midpoint, ``(u'_n - u'_{n-1})/dt + (1/tau + grad u) u'_mid =
    -(grad p' + r_M)`` with ``u'_mid = (u'_n + u'_{n-1})/2``, giving
    ``[(1/dt + 1/(2 tau)) I + grad u / 2] u'_n = u'_{n-1}/dt - (1/(2 tau) + grad u / 2) u'_{n-1}
    - grad p' - r_M``.

    Returns ``(u'_n, K_n)`` where ``K_n`` is the inverse of the scaled matrix
    ``dt * [...]`` so that it equals the backward-Euler ``K`` for ``theta=1``.
    """
    uprime_prev, grad_u, grad_pprime, r_M = (np.asarray(a, dtype=float) for a in (uprime_prev, grad_u, grad_pprime, r_M))
    tau = np.broadcast_to(np.asarray(tau_M, dtype=float), uprime_prev.shape[:-1])
    A = condensed_matrix(np, tau, grad_u, dt, theta) * dt
    cond = np.linalg.cond(A)
    bad = ~np.isfinite(cond) | (cond > cond_max)
    if np.any(bad):
        where = np.unravel_index(int(np.flatnonzero(bad.ravel())[0]), bad.shape)
        raise NumericalError(f"subscale matrix ill-conditioned (cond={cond[where]:.3e}) at point {where}")
    K = np.linalg.inv(A)
    rhs = condensed_rhs(np, uprime_prev, tau, grad_u, grad_pprime, r_M, dt, theta) * dt
    return np.einsum("...ij,...j->...i", K, rhs), K


def quasi_static_subscale(r_M, grad_pprime, tau_M):
    """u' = -tau_M (grad p' + r_M)."""
    return -np.asarray(tau_M)[..., None] * (np.asarray(grad_pprime) + np.asarray(r_M))


# --- convection forms -----------------------------------------------------


def _conv_integrands(a, u, grad_u, v, grad_v):
    c = np.einsum("...ij,...j,...i->...", grad_u, a, v)
    c_cons = -np.einsum("...i,...ij,...j->...", u, grad_v, a)
    return c, c_cons


def convection_forms(a, u, grad_u, v, grad_v, weights, variant="skew"):
    """Quadrature value of ``c``, ``c_cons`` or ``c_skew``.

    Fields are sampled at quadrature points: vectors ``(..., d)``, gradients
    ``(..., d, d)`` with ``[i, j] = d/dx_j`` of component ``i``.
    """
    c, c_cons = _conv_integrands(*(np.asarray(t, dtype=float) for t in (a, u, grad_u, v, grad_v)))
    w = np.asarray(weights)
    if variant == "standard":
        return float(np.sum(w * c))
    if variant == "cons":
        return float(np.sum(w * c_cons))
    if variant == "skew":
        return float(np.sum(w * 0.5 * (c + c_cons)))
    raise ValueError(f"unknown convection variant {variant!r}")


# --- cell kernels ---------------------------------------------------------


def _vector(xp, coefs, tabs, names, dim, order):
    parts = [field_derivatives(xp, coefs[n], tabs[n], dim, order) for n in names]
    u = xp.stack([p[0] for p in parts], axis=-1)
    gu = xp.stack([p[1] for p in parts], axis=-2)
    hu = xp.stack([p[2] for p in parts], axis=-3) if order >= 2 else None
    return u, gu, hu


def _momentum_test(xp, fv, fg, tabs, names, w, dim):
    return {n: project_value_grad(xp, fv[..., i], fg[..., i, :], tabs[n], dim, w) for i, n in enumerate(names)}


@dataclass(frozen=True)
class Scheme:
    """Static kernel configuration."""

    dim: int
    model: str
    theta: float = 1.0
    steady: bool = False


def navier_stokes_cell(scheme: Scheme, coefs, tabs, data, xp=jnp):
    """Local residuals of the coarse momentum, continuity and fine-pressure equations.

    ``data`` holds the previous-step coarse velocity coefficients ``old``,
    the stored subscale ``uprime_old``, the frozen ``tau``/``tau_c``, the
    source ``f`` at the scheme's evaluation time, weights ``w`` and scalars
    ``nu``/``dt``.  Also returns the fine-scale velocities at the new and
    evaluation levels.
    """
    d = scheme.dim
    names = [f"u{i}" for i in range(d)]
    th = scheme.theta
    nu, w, tau, tau_c, f = data["nu"], data["w"], data["tau"], data["tau_c"], data["f"]
    u_new, gu_new, hu_new = _vector(xp, coefs, tabs, names, d, 2)
    if scheme.steady:
        a, ga, ha = u_new, gu_new, hu_new
        dudt = xp.zeros_like(a)
    else:
        dt = data["dt"]
        u_old, gu_old, hu_old = _vector(xp, data["old"], tabs, names, d, 2)
        a = th * u_new + (1 - th) * u_old
        ga = th * gu_new + (1 - th) * gu_old
        ha = th * hu_new + (1 - th) * hu_old
        dudt = (u_new - u_old) / dt
    _, gp, _ = field_derivatives(xp, coefs["p"], tabs["p"], d, 1)
    p = field_derivatives(xp, coefs["p"], tabs["p"], d, 0)[0]
    _, gpp, _ = field_derivatives(xp, coefs["pp"], tabs["pp"], d, 1)
    r_M = strong_residual(xp, a, ga, ha, dudt, gp, f, nu)

    upold = data["uprime_old"]
    if scheme.model == NO_MODEL:
        up_new = xp.zeros_like(a)
        up = up_new
    elif scheme.model == QUASI_STATIC or scheme.steady:
        up_new = -tau[..., None] * (gpp + r_M)
        up = up_new
    else:
        A = condensed_matrix(xp, tau, ga, dt, th)
        rhs = condensed_rhs(xp, upold, tau, ga, gpp, r_M, dt, th)
        up_new = xp.linalg.solve(A, rhs[..., None])[..., 0]
        up = th * up_new + (1 - th) * upold

    eye = xp.eye(d)
    div_a = xp.einsum("...ii->...", ga)
    sym = 0.5 * (ga + xp.swapaxes(ga, -1, -2))
    conv_a = xp.einsum("...ij,...j->...i", ga, a)
    conv_up = xp.einsum("...ij,...j->...i", ga, up)
    outer = lambda x, y: x[..., :, None] * y[..., None, :]
    fv = 0.5 * conv_a + 0.5 * conv_up - f
    fg = (
        -0.5 * outer(a, a)                       # c_skew(a, a, v)
        + 2.0 * nu * sym                         # k(a, v)
        - p[..., None, None] * eye               # -b(v, p)
        + tau_c[..., None, None] * div_a[..., None, None] * eye
        - outer(up, a)                           # c_cons(a, u', v)
        - 0.5 * outer(a, up)                     # c_skew(u', a, v)
        - outer(up, up)                          # c_cons(u', u', v)
    )
    if not scheme.steady:
        fv = fv + dudt
        if scheme.model == DYNAMIC:
            fv = fv + (up_new - upold) / dt
    res = _momentum_test(xp, fv, fg, tabs, names, w, d)
    div_new = xp.einsum("...ii->...", gu_new)
    res["p"] = project_value_grad(xp, div_new, None, tabs["p"], d, w)
    res["pp"] = project_value_grad(xp, None, -up, tabs["pp"], d, w)
    return res, (up_new, up)


def oseen_cell(dim, coefs, tabs, data, xp=jnp):
    """Local residual of the steady Oseen system with the subscale eliminated."""
    names = [f"u{i}" for i in range(dim)]
    nu, w, tau, tau_c, f, a = data["nu"], data["w"], data["tau"], data["tau_c"], data["f"], data["a"]
    u, gu, hu = _vector(xp, coefs, tabs, names, dim, 2)
    p, gp, _ = field_derivatives(xp, coefs["p"], tabs["p"], dim, 1)
    _, gpp, _ = field_derivatives(xp, coefs["pp"], tabs["pp"], dim, 1)
    adv = xp.einsum("...ij,...j->...i", gu, a)
    r_M = adv - viscous_divergence(xp, hu, nu) + gp - f
    up = -tau[..., None] * (gpp + r_M)
    eye = xp.eye(dim)
    div_u = xp.einsum("...ii->...", gu)
    sym = 0.5 * (gu + xp.swapaxes(gu, -1, -2))
    fv = adv - f
    fg = (
        2.0 * nu * sym
        - p[..., None, None] * eye
        + tau_c[..., None, None] * div_u[..., None, None] * eye
        - up[..., :, None] * a[..., None, :]
    )
    res = _momentum_test(xp, fv, fg, tabs, names, w, dim)
    res["p"] = project_value_grad(xp, div_u, None, tabs["p"], dim, w)
    res["pp"] = project_value_grad(xp, None, -up, tabs["pp"], dim, w)
    return res, (up, up)


# --- assembly driver ------------------------------------------------------


FIELDS = ("u", "p", "pp")


class CellOperator:
    """Residual and consistent Jacobian of a cell kernel over the whole mesh.

    ``kernel(coefs, tabs, data)`` acts on one cell and returns
    ``(residuals by field, aux)``.  Per-cell ``data`` entries are arrays with a
    leading cell axis; ``scalars`` are broadcast to every cell.
    """

    def __init__(self, space: DivConformingSpace, kernel, chunk=None, extra_fixed=()):
        self.space = space
        self.quad = space.quadrature()
        q = self.quad
        self.names = space.velocity_names + ["p", "pp"]
        self.kernel = kernel
        self.conn = np.concatenate([q.conn[n] for n in self.names], axis=1)
        self.shapes = [q.local_shape(n) for n in self.names]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.tabs = {n: [jnp.asarray(t) for t in q.tables[n]] for n in self.names}
        self.cell_index = jnp.asarray(q.cell_index)
        nloc = self.conn.shape[1]
        self.chunk = chunk or max(1, min(q.n_cells, int(4e5 // (nloc * q.nq))))
        mask = np.zeros(space.size, dtype=bool)
        mask[space.free] = True
        mask[np.asarray(extra_fixed, dtype=np.int64)] = False
        self.free = np.flatnonzero(mask)
        reduce = -np.ones(space.size, dtype=np.int64)
        reduce[self.free] = np.arange(self.free.size)
        self.reduce = reduce
        self._assembler = None
        self._jac = jax.jit(jax.vmap(jax.jacfwd(self._local_pair, has_aux=True), in_axes=(0, 0, 0, None)))
        self._res = jax.jit(jax.vmap(self._local, in_axes=(0, 0, 0, None)))

    @property
    def assembler(self):
        if self._assembler is None:
            self._assembler = ReducedAssembler(self.conn, self.reduce, self.free.size)
        return self._assembler

    def _split(self, xloc):
        coefs, off = {}, 0
        for n, shp, sz in zip(self.names, self.shapes, self.sizes):
            coefs[n] = xloc[off : off + sz].reshape(shp)
            off += sz
        return coefs

    def _local(self, xloc, cidx, data, scalars):
        tabs = {n: [t[cidx[k]] for k, t in enumerate(self.tabs[n])] for n in self.names}
        res, aux = self.kernel(self._split(xloc), tabs, {**data, **scalars})
        return jnp.concatenate([res[n].reshape(-1) for n in self.names]), aux

    def _local_pair(self, xloc, cidx, data, scalars):
        r, aux = self._local(xloc, cidx, data, scalars)
        return r, (r, aux)

    def _chunks(self, x_full, data):
        n = self.quad.n_cells
        xl = np.asarray(x_full)[self.conn]
        for start in range(0, n, self.chunk):
            stop = min(start + self.chunk, n)
            sel = np.arange(start, start + self.chunk)
            sel[sel >= n] = 0
            d = _take(data, sel)
            yield start, stop, jnp.asarray(xl[sel]), self.cell_index[sel], d

    def residual(self, x_full, data, scalars):
        """Local residual blocks (ncell, nloc) and aux outputs."""
        out, aux = [], []
        for start, stop, xl, ci, d in self._chunks(x_full, data):
            r, a = self._res(xl, ci, d, scalars)
            out.append(np.asarray(r)[: stop - start])
            aux.append(tuple(np.asarray(t)[: stop - start] for t in a))
        res = np.concatenate(out)
        check_finite(res, "residual")
        return res, tuple(np.concatenate([a[i] for a in aux]) for i in range(len(aux[0])))

    def linearize(self, x_full, data, scalars):
        """(local Jacobians, local residuals, aux)."""
        jacs, ress, aux = [], [], []
        for start, stop, xl, ci, d in self._chunks(x_full, data):
            J, (r, a) = self._jac(xl, ci, d, scalars)
            jacs.append(np.asarray(J)[: stop - start])
            ress.append(np.asarray(r)[: stop - start])
            aux.append(tuple(np.asarray(t)[: stop - start] for t in a))
        J = np.concatenate(jacs)
        r = np.concatenate(ress)
        check_finite(r, "residual")
        check_finite(J, "Jacobian")
        return J, r, tuple(np.concatenate([a[i] for a in aux]) for i in range(len(aux[0])))

    def system(self, x_full, data, scalars):
        """Reduced (free-DOF) Jacobian and residual."""
        J, r, aux = self.linearize(x_full, data, scalars)
        A = self.assembler.matrix(J)
        R = self.assembler.vector(r)
        return A, R, aux

    def full_residual(self, local):
        return np.bincount(self.conn.ravel(), weights=np.asarray(local).ravel(), minlength=self.space.size)


class ReducedAssembler(SparseAssembler):
    """SparseAssembler restricted to DOFs with ``reduce[i] >= 0``."""

    def __init__(self, conn, reduce, size):
        m = conn.shape[1]
        rc = reduce[conn]
        rows = np.repeat(rc, m, axis=1).ravel()
        cols = np.tile(rc, (1, m)).ravel()
        self.sel = np.flatnonzero((rows >= 0) & (cols >= 0))
        key = rows[self.sel] * size + cols[self.sel]
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % size).astype(np.int32)
        self.indptr = np.searchsorted(uniq // size, np.arange(size + 1)).astype(np.int32)
        self.size = size
        vr = rc.ravel()
        self.vsel = np.flatnonzero(vr >= 0)
        self.vrow = vr[self.vsel]

    def matrix(self, blocks):
        data = np.bincount(self.slot, weights=np.asarray(blocks).reshape(-1)[self.sel], minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))

    def vector(self, local):
        return np.bincount(self.vrow, weights=np.asarray(local).reshape(-1)[self.vsel], minlength=self.size)


# --- problem-level systems ------------------------------------------------


@dataclass
class SubscaleState:
    """Fine-scale velocity at quadrature points, ``(ncell, nq, d)``."""

    uprime: np.ndarray

    @classmethod
    def zeros(cls, space: DivConformingSpace):
        q = space.quadrature()
        return cls(np.zeros((q.n_cells, q.nq, space.dim)))


@dataclass
class StepData:
    """Known quantities of one time step."""

    x_old: np.ndarray  # full coefficient vector at t_{n-1}
    uprime_old: np.ndarray
    t_old: float
    dt: float


def _tau_exceeds_viscous_bound(tau, G, nu, C_inv):
    # tau <= h^2 / (C_inv nu) underpins the stability estimates
    h2 = 1.0 / np.max(G, axis=-1)
    return bool(np.any(tau > h2[:, None] / (C_inv * nu) * (1 + 1e-12)))


class NavierStokesSystem:
    """Coupled (u^h, p^h, p') residual of one implicit step, or of the steady problem.

    Subscales are eliminated pointwise: condensed for the dynamic model,
    algebraic for the quasi-static model.  ``theta`` selects backward Euler
    (1) or the implicit midpoint rule (1/2).
    """

    def __init__(self, space: DivConformingSpace, fluid: FluidParams, stab: StabilizationConfig = StabilizationConfig(),
                 theta: float = 1.0, steady: bool = False):
        if theta not in (0.5, 1.0):
            raise ConfigError("theta must be 1 (backward Euler) or 0.5 (midpoint)")
        self.space, self.fluid, self.stab = space, fluid, stab
        self.theta, self.steady = theta, steady
        model = stab.effective_model
        if steady and model == DYNAMIC:
            model = QUASI_STATIC
        self.scheme = Scheme(space.dim, model, theta, steady)
        self.quad = space.quadrature()
        self.op = CellOperator(space, functools.partial(navier_stokes_cell, self.scheme))
        self.assumption2_violated = False

    @property
    def model(self):
        return self.scheme.model

    def eval_time(self, step: Optional[StepData]):
        if step is None:
            return 0.0
        return step.t_old + self.theta * step.dt

    def _data(self, x_full, step: Optional[StepData]):
        q, d = self.quad, self.space.dim
        names = self.space.velocity_names
        u_new = q.velocity(x_full, names, 0)[0]
        if self.steady:
            a = u_new
            dt_tau = None
            scalars = {"nu": self.fluid.nu, "dt": 1.0}
            uprime_old = np.zeros((q.n_cells, q.nq, d))
        else:
            u_old = q.velocity(step.x_old, names, 0)[0]
            a = self.theta * u_new + (1 - self.theta) * u_old
            dt_tau = step.dt if self.model == QUASI_STATIC else None
            scalars = {"nu": self.fluid.nu, "dt": step.dt}
            uprime_old = step.uprime_old
        tau = tau_m(np, a, self.fluid.nu, q.G[:, None, :], self.stab.C_inv, dt_tau)
        if self.model == DYNAMIC:
            self.assumption2_violated = _tau_exceeds_viscous_bound(tau, q.G, self.fluid.nu, self.stab.C_inv)
        if self.stab.tau_C_rule == "zero":
            tau_c = np.zeros_like(tau)
        else:
            tau_c = 1.0 / (tau * q.G.sum(axis=-1)[:, None])
        data = {
            "tau": tau,
            "tau_c": tau_c,
            "w": q.w,
            "f": self.fluid.source(q.x, self.eval_time(step)),
            "uprime_old": uprime_old,
        }
        if not self.steady:
            old = {}
            xl = np.asarray(step.x_old)
            for n in names:
                c = xl[q.conn[n]]
                old[n] = c.reshape((q.n_cells,) + q.local_shape(n))
            data["old"] = old
        return data, scalars

    def linearize(self, x_full, step: Optional[StepData] = None):
        """Free-DOF Jacobian, free-DOF residual and ``(u'_n, u'_eval)`` at quadrature points."""
        data, scalars = self._data(x_full, step)
        return self.op.system(x_full, data, scalars)

    def residual(self, x_full, step: Optional[StepData] = None, tau_from=None):
        """Free-DOF residual; ``tau_from`` freezes the parameters at another state."""
        data, scalars = self._data(x_full if tau_from is None else tau_from, step)
        local, aux = self.op.residual(x_full, data, scalars)
        return self.op.assembler.vector(local), aux

    def subscales(self, x_full, step: Optional[StepData] = None):
        data, scalars = self._data(x_full, step)
        return self.op.residual(x_full, data, scalars)[1]


def _take(tree, sel):
    if isinstance(tree, dict):
        return {k: _take(v, sel) for k, v in tree.items()}
    return jnp.asarray(np.asarray(tree)[sel])


def stokes_cell(dim, coefs, tabs, data, xp=jnp):
    """Stokes projector residual: discrete minus target form with grad-div penalty."""
    names = [f"u{i}" for i in range(dim)]
    nu, w, tau_c = data["nu"], data["w"], data["tau_c"]
    _, gu, _ = _vector(xp, coefs, tabs, names, dim, 1)
    p = field_derivatives(xp, coefs["p"], tabs["p"], dim, 0)[0]
    gu = gu - data["target_grad"]
    p = p - data["target_p"]
    eye = xp.eye(dim)
    div_u = xp.einsum("...ii->...", gu)
    fg = (
        nu * (gu + xp.swapaxes(gu, -1, -2))
        - p[..., None, None] * eye
        + tau_c[..., None, None] * div_u[..., None, None] * eye
    )
    res = _momentum_test_none(xp, fg, tabs, names, w, dim)
    res["p"] = project_value_grad(xp, div_u, None, tabs["p"], dim, w)
    res["pp"] = xp.zeros(coefs["pp"].shape)
    z = xp.zeros(w.shape + (dim,))
    return res, (z, z)


def _momentum_test_none(xp, fg, tabs, names, w, dim):
    return {n: project_value_grad(xp, None, fg[..., i, :], tabs[n], dim, w) for i, n in enumerate(names)}


def _target_at_points(space, quad, target):
    """(value, gradient, pressure) of a target given as callables or a coefficient vector."""
    if isinstance(target, (tuple, list)):
        u_fn, grad_fn = target[0], target[1]
        p_fn = target[2] if len(target) > 2 else None
        u = np.asarray(u_fn(quad.x), dtype=float)
        g = np.asarray(grad_fn(quad.x), dtype=float)
        p = np.asarray(p_fn(quad.x), dtype=float) if p_fn is not None else np.zeros(u.shape[:-1])
        return u, g, p
    x = space._as_full(target)
    u, g, _ = quad.velocity(x, space.velocity_names, 1)
    p = quad.evaluate("p", x, 0)[0]
    return u, g, p


def stokes_projector(space: DivConformingSpace, target, nu=1.0, stab: StabilizationConfig = StabilizationConfig(),
                     tau_c=None, boundary_values=None):
    """Project ``target`` onto the discrete spaces through the grad-div-penalized Stokes problem.

    ``target`` is ``(u, grad_u[, p])`` callables on points ``(..., d)`` or a
    full coefficient vector.  Velocity components whose constant mode is
    admissible (periodic directions only) get their mean matched to the
    target's.  Returns the full coefficient vector with the fine pressure
    zero and the coarse pressure at zero mean.
    """
    from .solvers import solve_linear  # local: solvers does not depend on forms
    from .spaces import remove_pressure_means

    quad = space.quadrature()
    u_t, g_t, p_t = _target_at_points(space, quad, target)
    if tau_c is None:
        if stab.tau_C_rule == "zero":
            tau_c = np.zeros(quad.w.shape)
        else:
            tau = tau_m(np, u_t, nu, quad.G[:, None, :], stab.C_inv)
            tau_c = 1.0 / (tau * quad.G.sum(axis=-1)[:, None])
    tau_c = np.broadcast_to(np.asarray(tau_c, dtype=float), quad.w.shape)
    pp = space.layout.block("pp")
    op = CellOperator(space, functools.partial(stokes_cell, space.dim), extra_fixed=np.arange(pp.start, pp.stop))
    x0 = np.zeros(space.size)
    if boundary_values is not None:
        x0[space.velocity_constrained] = np.asarray(boundary_values)[space.velocity_constrained]
    data = {"w": quad.w, "tau_c": tau_c, "target_grad": g_t, "target_p": p_t}
    A, R, _ = op.system(x0, data, {"nu": nu})
    comps = space.free_constant_velocity_components()
    if comps:
        rows, rhs = [], []
        for i in comps:
            name = space.velocity_names[i]
            weights = quad.load_vector(name, fv=np.ones(quad.w.shape))
            rows.append(weights[op.free])
            rhs.append(quad.integrate(u_t[..., i]) - weights @ x0)
        C = sp.csr_matrix(np.array(rows))
        A = sp.bmat([[A, C.T], [C, None]], format="csc")
        R = np.concatenate([R, -np.array(rhs)])
    sol = solve_linear(A, -R)
    x = x0.copy()
    x[op.free] += sol[: op.free.size]
    return remove_pressure_means(space, x)


class OseenSystem:
    """Steady Oseen problem with the subscale eliminated; linear in the unknowns."""

    def __init__(self, space: DivConformingSpace, nu, advection, source=None, stab: StabilizationConfig = StabilizationConfig(),
                 advection_grad=None, div_tol=1e-10):
        self.space, self.nu, self.stab = space, float(nu), stab
        if not self.nu > 0:
            raise ConfigError("viscosity must be positive")
        q = self.quad = space.quadrature()
        if callable(advection):
            a = np.asarray(advection(q.x), dtype=float)
            if advection_grad is not None:
                ga = np.asarray(advection_grad(q.x), dtype=float)
                div = np.abs(np.einsum("...ii->...", ga)).max()
                if div > div_tol * max(1.0, np.abs(ga).max()):
                    raise DataError(f"advection field is not solenoidal (max |div a| = {div:.3e})")
        else:
            a = np.broadcast_to(np.asarray(advection, dtype=float), q.x.shape).copy()
        self.a = a
        self.tau = tau_m(np, a, self.nu, q.G[:, None, :], stab.C_inv)
        if stab.tau_C_rule == "zero":
            self.tau_c = np.zeros_like(self.tau)
        else:
            self.tau_c = 1.0 / (self.tau * q.G.sum(axis=-1)[:, None])
        self.f = np.zeros(q.x.shape) if source is None else np.asarray(source(q.x), dtype=float)
        self.op = CellOperator(space, functools.partial(oseen_cell, space.dim))

    def data(self):
        return {"w": self.quad.w, "tau": self.tau, "tau_c": self.tau_c, "f": self.f, "a": self.a}

    def linearize(self, x_full):
        return self.op.system(x_full, self.data(), {"nu": self.nu})

    def solve(self, boundary_values=None):
        """Full coefficient vector with pressures at zero mean."""
        from .solvers import solve_linear
        from .spaces import remove_pressure_means

        x = np.zeros(self.space.size)
        if boundary_values is not None:
            bv = np.asarray(boundary_values)
            x[: bv.size] = bv
            x[self.space.free[self.space.free < bv.size]] = 0.0
        A, R, _ = self.linearize(x)
        x[self.op.free] -= solve_linear(A, R)
        return remove_pressure_means(self.space, x)

    def subscale(self, x_full):
        return self.op.residual(x_full, self.data(), {"nu": self.nu})[1][0]
