"""Steady Oseen benchmark: error norms and convergence studies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IOFailure
from .exact import OSEEN_BUMP, SeparableStreamFunction
from .forms import OseenSystem, StabilizationConfig, tau_m, viscous_divergence
from .spaces import NO_SLIP, BoundarySpec, Mesh, build_space

ADVECTIVE = "advective"
DIFFUSIVE = "diffusive"
REGIMES = {ADVECTIVE: (1e-6, 1.0), DIFFUSIVE: (1.0, 1e-3)}  # (nu, |a|)
DIRECTION = np.array([1.0, 0.5]) / math.hypot(1.0, 0.5)


@dataclass(frozen=True)
class OseenCase:
    """Constant advection ``a``, viscosity ``nu`` and a manufactured solution on the unit square."""

    nu: float
    a: tuple
    exact: SeparableStreamFunction = OSEEN_BUMP

    @classmethod
    def regime(cls, name):
        if name not in REGIMES:
            raise ConfigError(f"regime must be one of {tuple(REGIMES)}")
        nu, speed = REGIMES[name]
        return cls(nu, tuple(speed * DIRECTION))

    def source(self):
        return self.exact.oseen_source(self.nu, self.a)

    def space(self, n, k_prime, refinement=0):
        return build_space(Mesh.uniform(2, n), k_prime, BoundarySpec.uniform(2, NO_SLIP), refinement)

    def solve(self, space, stab=StabilizationConfig()):
        system = OseenSystem(space, self.nu, np.asarray(self.a), self.source(), stab)
        return system.solve(), system


def _tau(quad, a, nu, C_inv):
    a = np.broadcast_to(np.asarray(a, dtype=float), quad.x.shape)
    return a, tau_m(np, a, nu, quad.G[:, None, :], C_inv)


def _sym_sq(g):
    s = 0.5 * (g + np.swapaxes(g, -1, -2))
    return np.sum(s * s, axis=(-1, -2))


def triple_norm_terms(w, v, grad_v, hess_v, grad_q, a, nu, tau):
    """Integrated terms of the stabilized norms, from point values.

    Returns ``(viscous, streamline, second_order, l2)`` with
    ``|||.|||^2 = viscous + streamline`` and
    ``|||.|||_+^2 = |||.|||^2 + second_order + l2``.
    """
    adv = np.einsum("...ij,...j->...i", grad_v, a) + grad_q
    visc = np.sum(w * 2 * nu * _sym_sq(grad_v))
    stream = np.sum(w * tau * np.sum(adv * adv, axis=-1))
    second = 0.0
    l2 = 0.0
    if hess_v is not None:
        dv = viscous_divergence(np, hess_v, nu)
        second = np.sum(w * tau * np.sum(dv * dv, axis=-1))
    if v is not None:
        l2 = np.sum(w / tau * np.sum(v * v, axis=-1))
    return float(visc), float(stream), float(second), float(l2)


def triple_norm(w, grad_v, grad_q, a, nu, tau):
    visc, stream, _, _ = triple_norm_terms(w, None, grad_v, None, grad_q, a, nu, tau)
    return math.sqrt(visc + stream)


def triple_norm_plus(w, v, grad_v, hess_v, grad_q, a, nu, tau):
    return math.sqrt(sum(triple_norm_terms(w, v, grad_v, hess_v, grad_q, a, nu, tau)))


def discrete_fields(space, x, quad):
    """Velocity value/gradient/Hessian and total-pressure gradient at quadrature points."""
    u, g, h = quad.velocity(x, space.velocity_names, 2)
    gp = quad.evaluate("p", x, 1)[1] + quad.evaluate("pp", x, 1)[1]
    return u, g, h, gp


@dataclass
class OseenErrors:
    h: float
    norm: float
    norm_plus: float
    velocity_part: float


def oseen_errors(case: OseenCase, space, x, C_inv=36.0, n_gp=None) -> OseenErrors:
    """``|||(u - u^h, p - p~)|||``, its ``+`` variant and the viscous (velocity) part."""
    quad = space.quadrature(n_gp or space.k_prime + 4)
    u, g, h, gp = discrete_fields(space, x, quad)
    ex = case.exact
    e_u = ex.velocity(quad.x) - u
    e_g = ex.grad(quad.x) - g
    e_h = ex.hessian(quad.x) - h
    e_p = ex.pressure_grad(quad.x) - gp
    a, tau = _tau(quad, case.a, case.nu, C_inv)
    visc, stream, second, l2 = triple_norm_terms(quad.w, e_u, e_g, e_h, e_p, a, case.nu, tau)
    return OseenErrors(space.mesh.h_max, math.sqrt(visc + stream), math.sqrt(visc + stream + second + l2),
                       math.sqrt(visc))


def fitted_rate(h, err):
    """Least-squares slope of ``log err`` against ``log h``."""
    h, err = np.asarray(h, dtype=float), np.asarray(err, dtype=float)
    if h.size < 2:
        raise ConfigError("need at least two mesh levels to fit a rate")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


@dataclass
class ConvergenceStudy:
    k_prime: int
    regime: str
    levels: list
    errors: list = field(default_factory=list)

    @property
    def rate(self):
        return fitted_rate([e.h for e in self.errors], [e.norm for e in self.errors])

    @property
    def rate_plus(self):
        return fitted_rate([e.h for e in self.errors], [e.norm_plus for e in self.errors])

    @property
    def velocity_rate(self):
        return fitted_rate([e.h for e in self.errors], [e.velocity_part for e in self.errors])

    def write_csv(self, path):
        """Columns ``h, error_norm, error_norm_plus, fitted_rate`` (the rate repeats on every row)."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["h", "error_norm", "error_norm_plus", "fitted_rate", "velocity_part", "velocity_rate"])
                r, vr = self.rate, self.velocity_rate
                for e in self.errors:
                    w.writerow([format(v, ".17g") for v in (e.h, e.norm, e.norm_plus, r, e.velocity_part, vr)])
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc
        return path


def run_convergence_study(k_prime, levels=(8, 16, 32, 64), regime=ADVECTIVE, stab=StabilizationConfig(),
                          case=None) -> ConvergenceStudy:
    levels = list(levels)
    if len(levels) < 3 or any(b != 2 * a for a, b in zip(levels, levels[1:])):
        raise ConfigError("convergence studies need at least three nested levels (each twice the previous)")
    case = case or OseenCase.regime(regime)
    study = ConvergenceStudy(k_prime, regime, levels)
    for n in levels:
        space = case.space(n, k_prime)
        x, _ = case.solve(space, stab)
        study.errors.append(oseen_errors(case, space, x, stab.C_inv))
    return study


def reduced_form(space, x, y, a, nu, tau, tau_c=None, quad=None):
    """``A_red((u, p~), (v, q~))`` evaluated by quadrature.

    ``x`` and ``y`` are full coefficient vectors; the total pressure is the
    sum of their coarse and fine pressure fields.
    """
    quad = quad or space.quadrature()
    u, gu, hu, gp = discrete_fields(space, x, quad)
    v, gv, _, gq = discrete_fields(space, y, quad)
    a = np.broadcast_to(np.asarray(a, dtype=float), u.shape)
    tau = np.broadcast_to(tau, quad.w.shape)
    conv = np.einsum("...ij,...j,...i->...", gu, a, v)
    su, sv = 0.5 * (gu + np.swapaxes(gu, -1, -2)), 0.5 * (gv + np.swapaxes(gv, -1, -2))
    k = 2 * nu * np.sum(su * sv, axis=(-1, -2))
    val = conv + k
    if tau_c is not None:
        val = val + tau_c * np.einsum("...ii->...", gu) * np.einsum("...ii->...", gv)
    r = np.einsum("...ij,...j->...i", gu, a) - viscous_divergence(np, hu, nu) + gp
    t = np.einsum("...ij,...j->...i", gv, a) + gq
    val = val + tau * np.sum(r * t, axis=-1)
    return float(np.sum(quad.w * val))
