"""Scalar diagnostics, error norms, field sampling and CSV output."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import IOFailure, InputError
from .spline_basis import tensor_eval

CSV_HEADER = ("t", "E_k", "eps_total", "eps_resolved", "eps_model", "div_max", "newton_iters")


@dataclass
class DiagnosticsRecord:
    t: float
    E_k: float
    eps_total: float = math.nan
    eps_resolved: float = 0.0
    eps_model: float = math.nan
    div_max: float = 0.0
    newton_iters: int = 0
    assumption2_violated: bool = False


def _velocity(space, coef, quad=None, order=1):
    quad = quad or space.quadrature()
    return quad, space.interpolate_velocity(coef, quad, order)


def kinetic_energy(space, coef, quad=None) -> float:
    """Volume-averaged kinetic energy ``(1/|Omega|) int u.u/2``."""
    quad, (u, _, _) = _velocity(space, coef, quad, 0)
    return quad.integrate(0.5 * np.sum(u * u, axis=-1)) / space.mesh.volume


def total_energy(space, coef, uprime, quad=None) -> float:
    """``||u^h + u'||^2 / 2`` with ``u'`` given at quadrature points."""
    quad, (u, _, _) = _velocity(space, coef, quad, 0)
    v = u + np.asarray(uprime)
    return 0.5 * quad.integrate(np.sum(v * v, axis=-1))


def viscous_dissipation(space, coef, nu, quad=None, normalize=True) -> float:
    """``int 2 nu sym(grad u):sym(grad u)``, divided by ``|Omega|`` when ``normalize``."""
    quad, (_, g, _) = _velocity(space, coef, quad, 1)
    s = 0.5 * (g + np.swapaxes(g, -1, -2))
    val = quad.integrate(2.0 * nu * np.sum(s * s, axis=(-1, -2)))
    return val / space.mesh.volume if normalize else val


def div_sup(space, coef, quad=None) -> float:
    quad, (_, g, _) = _velocity(space, coef, quad, 1)
    return float(np.max(np.abs(np.einsum("...ii->...", g))))


def dissipation_split(t, E_k, eps_resolved):
    """Total dissipation ``-dE_k/dt`` by finite differences and the model remainder.

    Interior points use the centered (second-order, nonuniform-aware)
    difference; endpoints use one-sided differences.
    """
    t = np.asarray(t, dtype=float)
    E = np.asarray(E_k, dtype=float)
    if t.size < 2:
        raise InputError("dissipation_split needs at least two samples")
    total = -np.gradient(E, t, edge_order=1)
    model = total - np.asarray(eps_resolved, dtype=float)
    return total, model


def l2_error(space, coef, exact, quad=None) -> float:
    """``||u^h - u||_L2`` with ``exact(x) -> (..., d)``."""
    quad, (u, _, _) = _velocity(space, coef, quad, 0)
    e = u - np.asarray(exact(quad.x))
    return math.sqrt(quad.integrate(np.sum(e * e, axis=-1)))


def h1_seminorm_error(space, coef, exact_grad, quad=None) -> float:
    """``|u^h - u|_H1`` with ``exact_grad(x) -> (..., d, d)``, ``[i, j] = du_i/dx_j``."""
    quad, (_, g, _) = _velocity(space, coef, quad, 1)
    e = g - np.asarray(exact_grad(quad.x))
    return math.sqrt(quad.integrate(np.sum(e * e, axis=(-1, -2))))


def accurate_quadrature(space):
    """A rule with two extra points per direction, for errors against smooth fields."""
    return space.quadrature(space.k_prime + 4)


# --- output ---------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(records, path):
    """Write records with the fixed diagnostics header."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in records:
                d = asdict(r) if not isinstance(r, dict) else r
                w.writerow([_fmt(d[k]) for k in CSV_HEADER])
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path):
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise IOFailure(f"{path}: unexpected header")
    out = []
    for row in rows[1:]:
        vals = dict(zip(CSV_HEADER, row))
        out.append(
            DiagnosticsRecord(**{k: (int(v) if k == "newton_iters" else float(v)) for k, v in vals.items()})
        )
    return out


def _field_at(space, coef, name_list, point):
    vals = []
    for n in name_list:
        kvs = space.kvs(n)
        ev = tensor_eval(kvs, point, 0)
        idx = space.layout.offsets[n] + np.ravel_multi_index(tuple(ev.indices.T), space.layout.shapes[n])
        vals.append(float(ev.values @ coef[idx]))
    return vals


def point_values(space, coef, points, which="u"):
    """Field values at arbitrary points ``(..., d)``; velocity adds a trailing component axis."""
    if which not in ("u", "p", "pp"):
        raise InputError(f"unknown field {which!r}")
    coef = space._as_full(coef)
    names = space.velocity_names if which == "u" else [which]
    pts = np.asarray(points, dtype=float)
    vals = np.array([_field_at(space, coef, names, x) for x in pts.reshape(-1, space.dim)])
    return vals.reshape(pts.shape[:-1] + ((space.dim,) if which == "u" else ()))


def sample_field(space, coef, which="u", n_points=11, path=None):
    """Sample velocity (``"u"``) or a pressure (``"p"``/``"pp"``) on a uniform grid.

    Returns an array whose rows are ``(x[, y[, z]], components...)`` and
    writes it as CSV when ``path`` is given.
    """
    if which not in ("u", "p", "pp"):
        raise InputError(f"unknown field {which!r}")
    n = [n_points] * space.dim if np.isscalar(n_points) else list(n_points)
    axes = [np.linspace(a, b, m) for (a, b), m in zip(space.mesh.box, n)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, space.dim)
    vals = point_values(space, coef, grid, which).reshape(len(grid), -1)
    rows = np.hstack([grid, vals])
    if path is not None:
        coords = ["x", "y", "z"][: space.dim]
        comps = [f"u{i}" for i in range(space.dim)] if which == "u" else [which]
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(coords + comps)
                for r in rows:
                    w.writerow([_fmt(v) for v in r])
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc
    return rows


def record_fields():
    return [f.name for f in fields(DiagnosticsRecord)]
