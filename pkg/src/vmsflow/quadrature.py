"""Gauss quadrature on box cells, tabulated tensor bases and sparse accumulation.

Quadrature happens on *cells*.  A cell is a mesh element, or a sub-element
when the fine-scale pressure lives on a refined mesh.  Every scalar spline
field is tabulated per direction, and multivariate quantities are obtained by
sum factorization (``interpolate`` / ``project_to_tests``), which works the same
with numpy and ``jax.numpy``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError
from .spline_basis import element_tables


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


def gauss_rule(n_points: int, interval=(0.0, 1.0)) -> QuadratureRule:
    a, b = interval
    x, w = np.polynomial.legendre.leggauss(n_points)
    return QuadratureRule(0.5 * (b - a) * (x + 1.0) + a, 0.5 * (b - a) * w)


@dataclass(frozen=True)
class ElementMetric:
    G: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.trace(self.G))

    @property
    def contraction(self) -> float:
        """G:G"""
        return float(np.sum(self.G * self.G))


def metric(mesh, element=None) -> ElementMetric:
    """Metric tensor of the affine map from the unit parent cube to an element.

    Elements of the uniform box mesh all share one metric, so ``element`` is
    only validated.
    """
    if element is not None:
        idx = np.atleast_1d(element)
        if idx.size != mesh.dim or np.any(idx < 0) or np.any(idx >= mesh.n_elements):
            raise IndexError(f"element {element} not in mesh {mesh.n_elements}")
    return ElementMetric(np.diag(1.0 / np.asarray(mesh.h) ** 2))


# --- sum factorization ----------------------------------------------------

_Q = "ijk"
_A = "abc"


def interpolate(xp, coef, tabs, orders):
    """Evaluate a tensor spline on a tensor grid of points.

    ``coef`` has shape ``(..., n_1, ..., n_d)``, ``tabs[k]`` has shape
    ``(..., q_k, n_k, 3)``; returns shape ``(..., q_1, ..., q_d)``.
    """
    d = len(tabs)
    ops = [t[..., o] for t, o in zip(tabs, orders)]
    spec = ",".join(f"...{_Q[k]}{_A[k]}" for k in range(d))
    spec += f",...{_A[:d]}->...{_Q[:d]}"
    return xp.einsum(spec, *ops, coef)


def project_to_tests(xp, values, tabs, orders):
    """Integrate ``values`` (already weighted) against each tensor basis function."""
    d = len(tabs)
    ops = [t[..., o] for t, o in zip(tabs, orders)]
    spec = ",".join(f"...{_Q[k]}{_A[k]}" for k in range(d))
    spec += f",...{_Q[:d]}->...{_A[:d]}"
    return xp.einsum(spec, *ops, values)


def unit_orders(dim, *dirs):
    o = [0] * dim
    for k in dirs:
        o[k] += 1
    return tuple(o)


def field_derivatives(xp, coef, tabs, dim, order=2):
    """Value, gradient ``(..., q, d)`` and Hessian ``(..., q, d, d)`` of a scalar field."""
    lead = coef.shape[: coef.ndim - dim]
    def flat(a):
        return a.reshape(lead + (-1,))
    val = flat(interpolate(xp, coef, tabs, unit_orders(dim)))
    if order < 1:
        return val, None, None
    grad = xp.stack([flat(interpolate(xp, coef, tabs, unit_orders(dim, i))) for i in range(dim)], axis=-1)
    if order < 2:
        return val, grad, None
    rows = []
    for i in range(dim):
        rows.append(xp.stack([flat(interpolate(xp, coef, tabs, unit_orders(dim, i, j))) for j in range(dim)], axis=-1))
    return val, grad, xp.stack(rows, axis=-2)


def project_value_grad(xp, fv, fg, tabs, dim, w):
    """``sum_q w (fv N_a + fg . grad N_a)`` for every local basis function.

    ``fv`` is ``(..., q)`` or ``None``; ``fg`` is ``(..., q, d)`` or ``None``.
    """
    nq = [t.shape[-3] for t in tabs]
    lead = w.shape[:-1]
    out = 0.0
    if fv is not None:
        out = out + project_to_tests(xp, (w * fv).reshape(lead + tuple(nq)), tabs, unit_orders(dim))
    if fg is not None:
        for j in range(dim):
            out = out + project_to_tests(xp, (w * fg[..., j]).reshape(lead + tuple(nq)), tabs, unit_orders(dim, j))
    return out


# --- cells ----------------------------------------------------------------


class FieldLayout:
    """Ordered scalar fields (name -> per-direction knot vectors) with offsets."""

    def __init__(self, fields):
        self.names = [name for name, _ in fields]
        self.kvs = dict(fields)
        self.shapes = {name: tuple(kv.dim for kv in kvs) for name, kvs in fields}
        self.sizes = {name: int(np.prod(s)) for name, s in self.shapes.items()}
        self.offsets = {}
        off = 0
        for name in self.names:
            self.offsets[name] = off
            off += self.sizes[name]
        self.size = off

    def block(self, name) -> slice:
        return slice(self.offsets[name], self.offsets[name] + self.sizes[name])

    def index(self, name, multi):
        return self.offsets[name] + np.ravel_multi_index(tuple(np.asarray(multi).T), self.shapes[name])


class CellQuadrature:
    """Gauss points on a uniform cell grid and tabulated bases of the fields.

    ``refinement`` splits every mesh element into ``2**refinement`` cells per
    direction; ``fine_fields`` names the fields whose knot vectors live on the
    refined mesh.
    """

    def __init__(self, mesh, layout: FieldLayout, n_gp: int, refinement: int = 0,
                 fine_fields=()):
        self.mesh = mesh
        self.layout = layout
        self.dim = mesh.dim
        self.n_gp = n_gp
        split = 2 ** refinement
        self.cells_per_dir = tuple(n * split for n in mesh.n_elements)
        self.n_cells = int(np.prod(self.cells_per_dir))
        self.nq = n_gp ** self.dim
        self.points1d = []
        self.weights1d = []
        for k in range(self.dim):
            a, b = mesh.box[k]
            nc = self.cells_per_dir[k]
            edges = np.linspace(a, b, nc + 1)
            rule = gauss_rule(n_gp)
            pts = edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * rule.points[None, :]
            self.points1d.append(pts)
            self.weights1d.append((b - a) / nc * rule.weights)
        # per field, per direction: tables (nc_k, q, p+1, 3) and dofs (nc_k, p+1)
        self.tables = {}
        self.dofs1d = {}
        for name in layout.names:
            tabs, dofs = [], []
            for k, kv in enumerate(layout.kvs[name]):
                nc = self.cells_per_dir[k]
                cell_el = np.arange(nc) if name in fine_fields else np.arange(nc) // split
                t, d = element_tables(kv, cell_el, self.points1d[k])
                tabs.append(t)
                dofs.append(d)
            self.tables[name] = tabs
            self.dofs1d[name] = dofs
        grids = np.meshgrid(*[np.arange(n) for n in self.cells_per_dir], indexing="ij")
        self.cell_index = np.stack([g.ravel() for g in grids], axis=1)  # (ncell, dim)
        self.element_index = self.cell_index // split
        self.conn = {name: self._connectivity(name) for name in layout.names}
        # physical points and weights, C-ordered over (q_1..q_d)
        xs = [self.points1d[k][self.cell_index[:, k]] for k in range(self.dim)]
        mesh_pts = np.meshgrid(*[np.arange(n_gp)] * self.dim, indexing="ij")
        self.x = np.stack(
            [xs[k][:, mesh_pts[k].ravel()] for k in range(self.dim)], axis=-1
        )
        w = np.ones(1)
        for k in range(self.dim):
            w = np.multiply.outer(w, self.weights1d[k]).ravel()
        self.w = np.broadcast_to(w, (self.n_cells, self.nq)).copy()
        self.G = np.broadcast_to(1.0 / np.asarray(mesh.h) ** 2, (self.n_cells, self.dim)).copy()

    def _connectivity(self, name):
        dofs = [self.dofs1d[name][k][self.cell_index[:, k]] for k in range(self.dim)]
        shape = self.layout.shapes[name]
        strides = np.cumprod((1,) + shape[:0:-1])[::-1]
        flat = np.zeros((self.n_cells,) + tuple(d.shape[1] for d in dofs), dtype=np.int64)
        for k in range(self.dim):
            expand = [np.newaxis] * self.dim
            expand[k] = slice(None)
            flat = flat + strides[k] * dofs[k][(slice(None), *expand)]
        return (self.layout.offsets[name] + flat).reshape(self.n_cells, -1)

    def local_shape(self, name):
        return tuple(t.shape[2] for t in self.tables[name])

    def cell_tables(self, name, cells=slice(None)):
        return [self.tables[name][k][self.cell_index[cells, k]] for k in range(self.dim)]

    def evaluate(self, name, coef_full, order=1, cells=slice(None)):
        """(value, grad, hess) of a scalar field at all quadrature points."""
        c = np.asarray(coef_full)[self.conn[name][cells]]
        c = c.reshape((c.shape[0],) + self.local_shape(name))
        return field_derivatives(np, c, self.cell_tables(name, cells), self.dim, order)

    def velocity(self, coef_full, names, order=1):
        """Vector field: value (c,q,d), gradient (c,q,d,d) [i,j]=du_i/dx_j, Hessian (c,q,d,d,d)."""
        parts = [self.evaluate(n, coef_full, order) for n in names]
        val = np.stack([p[0] for p in parts], axis=-1)
        grad = np.stack([p[1] for p in parts], axis=-2) if order >= 1 else None
        hess = np.stack([p[2] for p in parts], axis=-3) if order >= 2 else None
        return val, grad, hess

    def integrate(self, values):
        return float(np.sum(self.w * values))

    def load_vector(self, name, fv=None, fg=None):
        """Global vector ``int fv N + fg . grad N`` over the field's basis."""
        loc = project_value_grad(np, fv, fg, self.cell_tables(name), self.dim, self.w)
        out = np.zeros(self.layout.size)
        np.add.at(out, self.conn[name], loc.reshape(self.n_cells, -1))
        return out


# --- sparse accumulation --------------------------------------------------


class SparseAssembler:
    """Scatter of dense cell blocks into a fixed CSR pattern.

    Accumulation uses ``np.bincount`` over a precomputed slot map, so the
    result does not depend on cell processing order beyond float summation
    in a fixed sequence.
    """

    def __init__(self, conn: np.ndarray, size: int):
        self.conn = conn
        self.size = size
        n, m = conn.shape
        rows = np.repeat(conn, m, axis=1).ravel()
        cols = np.tile(conn, (1, m)).ravel()
        key = rows.astype(np.int64) * size + cols
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % size).astype(np.int32)
        row_of = uniq // size
        self.indptr = np.searchsorted(row_of, np.arange(size + 1)).astype(np.int32)

    def matrix(self, blocks: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.slot, weights=np.asarray(blocks).ravel(), minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))

    def vector(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.conn.ravel(), weights=np.asarray(local).ravel(), minlength=self.size)


def check_finite(local: np.ndarray, what: str):
    bad = ~np.isfinite(np.asarray(local).reshape(local.shape[0], -1)).all(axis=1)
    if bad.any():
        cell = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite {what} in cell {cell}")


def tensor_basis(xp, tabs, dim, order=1):
    """Explicit local basis: values ``(..., q, a)`` and gradients ``(..., q, a, d)``."""
    def product(orders):
        ops = [t[..., o] for t, o in zip(tabs, orders)]
        spec = ",".join(f"...{_Q[k]}{_A[k]}" for k in range(dim))
        spec += f"->...{_Q[:dim]}{_A[:dim]}"
        out = xp.einsum(spec, *ops)
        lead = out.shape[: out.ndim - 2 * dim]
        nq = int(np.prod(out.shape[len(lead): len(lead) + dim]))
        return out.reshape(lead + (nq, -1))
    N = product(unit_orders(dim))
    if order < 1:
        return N, None
    dN = xp.stack([product(unit_orders(dim, j)) for j in range(dim)], axis=-1)
    return N, dN


def assemble_blocks(quad: CellQuadrature, blocks) -> sp.csr_matrix:
    """Assemble ``{(row_field, col_field): local (c, a, b)}`` into one matrix."""
    rows, cols, vals = [], [], []
    for (rname, cname), loc in blocks.items():
        rc = quad.conn[rname]
        cc = quad.conn[cname]
        rows.append(np.broadcast_to(rc[:, :, None], loc.shape).ravel())
        cols.append(np.broadcast_to(cc[:, None, :], loc.shape).ravel())
        vals.append(np.asarray(loc).ravel())
    n = quad.layout.size
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
