"""Fast self-checks of the discretization building blocks (``solver check``)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forms import condensed_subscale_update, tau_C, tau_M_dynamic, tau_M_quasistatic
from .quadrature import assemble_blocks, tensor_basis
from .spaces import NO_SLIP, PERIODIC, BoundarySpec, Mesh, build_space
from .spline_basis import eval_basis, open_knot_vector, periodic_knot_vector


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tol:.1e})"


def _result(name, value, tol):
    return CheckResult(name, bool(value <= tol), float(value), tol)


def partition_of_unity(rng, n_points=200):
    """Max over random points and degrees 0..3 of ``|sum N - 1|`` and ``|sum N'|``."""
    worst = 0.0
    for p in range(4):
        for kv in (open_knot_vector(p, 5, (0.0, 2.0)), periodic_knot_vector(p, 6, (-1.0, 1.0))):
            a, b = kv.interval
            for x in rng.uniform(a, b, n_points):
                ev = eval_basis(kv, x, 2)
                worst = max(worst, abs(ev.values.sum() - 1), abs(ev.d1.sum()), abs(ev.d2.sum()) * 1e-2)
    return worst


def polynomial_reproduction(rng, n_points=60):
    """Least-squares fit of monomials ``x^k``, ``k <= p``, in clamped spline spaces; max residual."""
    worst = 0.0
    for p in range(1, 4):
        kv = open_knot_vector(p, 4, (0.0, 1.0))
        xs = np.sort(rng.uniform(0, 1, n_points))
        A = np.zeros((xs.size, kv.dim))
        for r, x in enumerate(xs):
            ev = eval_basis(kv, x, 0)
            A[r, kv.dof_index(ev.first + np.arange(p + 1))] += ev.values
        for k in range(p + 1):
            c, *_ = np.linalg.lstsq(A, xs ** k, rcond=None)
            worst = max(worst, float(np.max(np.abs(A @ c - xs ** k))))
    return worst


def pressure_mass(space, quad):
    N, _ = tensor_basis(np, quad.cell_tables("p"), space.dim, order=0)
    return assemble_blocks(quad, {("p", "p"): np.einsum("cq,cqa,cqb->cab", quad.w, N, N)})


def divergence_compatibility(space, rng, n_vectors=20):
    """Relative gap between ``div u^h`` and its L2 projection onto the pressure space."""
    from .solvers import solve_linear

    quad = space.quadrature()
    M = pressure_mass(space, quad)
    blk = space.layout.block("p")
    M = M[blk][:, blk]
    B = space.divergence_matrix(quad)[blk][:, : space.n_velocity]
    worst = 0.0
    for _ in range(n_vectors):
        u = rng.standard_normal(space.n_velocity)
        _, g, _ = space.interpolate_velocity(u, quad, 1)
        div = np.einsum("...ii->...", g)
        q = np.zeros(space.size)
        q[blk] = solve_linear(M, B @ u, rtol=1e-13)
        proj = quad.evaluate("p", q, 0)[0]
        worst = max(worst, float(np.max(np.abs(proj - div)) / max(np.max(np.abs(div)), 1e-300)))
    return worst


def tau_values():
    """Deviation of the stabilization parameters from hand-evaluated values."""
    G = np.array([100.0, 100.0])
    dyn = float(tau_M_dynamic(np.zeros(2), 0.01, G, 36.0))
    qs = float(tau_M_quasistatic(np.zeros(2), 0.01, G, 36.0, 0.05))
    tc = float(tau_C(0.02, G))
    return max(abs(dyn - 0.1 ** 2 / (math.sqrt(2) * 36 * 0.01)), abs(dyn - 0.0196419) - 5e-8,
               abs(qs - (1600 + dyn ** -2) ** -0.5), abs(qs - 0.0154451) - 5e-8, abs(tc - 0.25))


def condensation_example():
    up, _ = condensed_subscale_update(np.array([1.0, 0.0]), np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2),
                                      np.array([0.0, 1.0]), np.array(0.05), 0.1)
    return float(np.max(np.abs(up - [1 / 3 + 0.01 / 9, -0.1 / 3])))


def run_checks(seed=0):
    rng = np.random.default_rng(seed)
    out = [
        _result("partition of unity", partition_of_unity(rng), 1e-12),
        _result("polynomial reproduction", polynomial_reproduction(rng), 1e-10),
    ]
    for k_prime in (1, 2):
        for bc, label in ((BoundarySpec.uniform(2, NO_SLIP), "walls"), (BoundarySpec.uniform(2, PERIODIC), "periodic")):
            space = build_space(Mesh.uniform(2, 4), k_prime, bc)
            out.append(_result(f"divergence compatibility k'={k_prime} {label}",
                               divergence_compatibility(space, rng), 1e-10))
    space = build_space(Mesh.uniform(3, 3), 1, BoundarySpec.uniform(3, NO_SLIP))
    out.append(_result("divergence compatibility 3D", divergence_compatibility(space, rng, 5), 1e-10))
    out.append(_result("stabilization parameters", tau_values(), 1e-12))
    out.append(_result("condensed subscale example", condensation_example(), 1e-12))
    return out
