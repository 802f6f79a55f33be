"""Divergence-conforming spline spaces on uniform box meshes.

Velocity component ``i`` has degree ``k'+1`` in direction ``i`` and ``k'`` in
the others; both pressure spaces have degree ``k'``.  All share the same
uniform knots, so the divergence of any velocity lies in the pressure space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DataError, InputError
from .quadrature import CellQuadrature, FieldLayout, assemble_blocks, tensor_basis
from .spline_basis import open_knot_vector, periodic_knot_vector

PERIODIC = "periodic"
NO_PENETRATION = "no-penetration"
FREE_SLIP = "free-slip"
NO_SLIP = "no-slip"
PRESCRIBED = "prescribed"
CONDITIONS = (PERIODIC, NO_PENETRATION, FREE_SLIP, NO_SLIP, PRESCRIBED)


@dataclass(frozen=True)
class Mesh:
    box: tuple
    n_elements: tuple

    def __post_init__(self):
        box = tuple((float(a), float(b)) for a, b in self.box)
        n = tuple(int(k) for k in self.n_elements)
        if len(box) != len(n) or len(n) not in (2, 3):
            raise InputError("mesh must be 2D or 3D with one element count per direction")
        if any(k < 1 for k in n) or any(not b > a for a, b in box):
            raise InputError("element counts must be positive and extents nondegenerate")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "n_elements", n)

    @classmethod
    def uniform(cls, dim, n, extent=(0.0, 1.0)):
        return cls((tuple(extent),) * dim, (n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.n_elements)

    @property
    def h(self) -> tuple:
        return tuple((b - a) / n for (a, b), n in zip(self.box, self.n_elements))

    @property
    def h_max(self) -> float:
        return max(self.h)

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in self.box]))


@dataclass(frozen=True)
class BoundarySpec:
    """Condition per face ``(direction, side)``; ``velocity(x)`` feeds prescribed faces.

    ``velocity`` takes points of shape ``(..., dim)`` and returns ``(..., dim)``.
    """

    faces: dict
    velocity: Optional[Callable] = field(default=None, compare=False)

    @classmethod
    def uniform(cls, dim, condition, velocity=None):
        return cls({(k, s): condition for k in range(dim) for s in (0, 1)}, velocity)

    @classmethod
    def periodic(cls, dim):
        return cls.uniform(dim, PERIODIC)

    def condition(self, direction, side):
        return self.faces[(direction, side)]

    def validate(self, dim):
        for k in range(dim):
            for s in (0, 1):
                c = self.faces.get((k, s))
                if c not in CONDITIONS:
                    raise ConfigError(f"face {(k, s)}: unknown or missing condition {c!r}")
            if (self.faces[(k, 0)] == PERIODIC) != (self.faces[(k, 1)] == PERIODIC):
                raise ConfigError(f"periodic faces must come in pairs (direction {k})")
        if PRESCRIBED in self.faces.values() and self.velocity is None:
            raise ConfigError("prescribed-velocity faces need a velocity field")

    def periodic_directions(self, dim):
        return tuple(self.faces[(k, 0)] == PERIODIC for k in range(dim))


class DivConformingSpace:
    """Coarse velocity, coarse pressure and fine pressure spaces with DOF maps.

    The global unknown vector is laid out as ``[u_0, ..., u_{d-1}, p, p']``.
    """

    def __init__(self, mesh: Mesh, k_prime: int, bc: BoundarySpec, fine_pressure_refinement: int = 0):
        if k_prime not in (1, 2):
            raise InputError(f"k_prime must be 1 or 2, got {k_prime}")
        if fine_pressure_refinement < 0:
            raise InputError("fine_pressure_refinement must be >= 0")
        bc.validate(mesh.dim)
        self.mesh = mesh
        self.dim = mesh.dim
        self.k_prime = k_prime
        self.bc = bc
        self.refinement = fine_pressure_refinement
        self.periodic = bc.periodic_directions(mesh.dim)

        def kv(degree, k, refine=0):
            make = periodic_knot_vector if self.periodic[k] else open_knot_vector
            return make(degree, mesh.n_elements[k] * 2 ** refine, mesh.box[k])

        d = self.dim
        self.velocity_names = [f"u{i}" for i in range(d)]
        fields = [
            (f"u{i}", [kv(k_prime + (1 if k == i else 0), k) for k in range(d)]) for i in range(d)
        ]
        fields.append(("p", [kv(k_prime, k) for k in range(d)]))
        fields.append(("pp", [kv(k_prime, k, self.refinement) for k in range(d)]))
        self.layout = FieldLayout(fields)
        self.n_velocity = sum(self.layout.sizes[n] for n in self.velocity_names)
        self._find_boundary_dofs()

    # -- DOF maps ----------------------------------------------------------

    def kvs(self, name):
        return self.layout.kvs[name]

    @property
    def size(self) -> int:
        return self.layout.size

    def dof(self, name, multi):
        """Global index of tensor index ``multi`` in field ``name``."""
        return self.layout.index(name, multi)

    def tensor_index(self, gidx):
        """Inverse of :meth:`dof`: ``(field name, multi-index)``."""
        for name in self.layout.names:
            blk = self.layout.block(name)
            if blk.start <= gidx < blk.stop:
                return name, np.unravel_index(gidx - blk.start, self.layout.shapes[name])
        raise IndexError(gidx)

    def dof_points(self) -> np.ndarray:
        """Greville abscissae of every DOF, ``(size, dim)``."""
        pts = np.zeros((self.size, self.dim))
        for name in self.layout.names:
            grids = np.meshgrid(*[kv.greville() for kv in self.kvs(name)], indexing="ij")
            pts[self.layout.block(name)] = np.stack([g.ravel() for g in grids], axis=-1)
        return pts

    def _face_dofs(self, name, k, side):
        shape = self.layout.shapes[name]
        idx = np.indices(shape).reshape(self.dim, -1).T
        sel = idx[:, k] == (0 if side == 0 else shape[k] - 1)
        return self.layout.offsets[name] + np.ravel_multi_index(tuple(idx[sel].T), shape)

    def _find_boundary_dofs(self):
        self.face_normal_dofs = {}
        self.face_tangential_dofs = {}
        normal, tangential_fixed, tangential_prescribed = set(), set(), set()
        for (k, s), cond in self.bc.faces.items():
            if cond == PERIODIC:
                continue
            nd = self._face_dofs(f"u{k}", k, s)
            self.face_normal_dofs[(k, s)] = nd
            normal.update(nd.tolist())
            tang = np.concatenate([self._face_dofs(f"u{i}", k, s) for i in range(self.dim) if i != k])
            self.face_tangential_dofs[(k, s)] = tang
            if cond == NO_SLIP:
                tangential_fixed.update(tang.tolist())
            elif cond == PRESCRIBED:
                tangential_prescribed.update(tang.tolist())
        self.normal_dofs = np.array(sorted(normal), dtype=np.int64)
        self.noslip_tangential_dofs = np.array(sorted(tangential_fixed - normal), dtype=np.int64)
        self.prescribed_tangential_dofs = np.array(
            sorted(tangential_prescribed - normal - tangential_fixed), dtype=np.int64
        )
        self.velocity_constrained = np.array(
            sorted(normal | tangential_fixed | tangential_prescribed), dtype=np.int64
        )
        self.pressure_pins = self._pressure_pins()

    def _pressure_pins(self):
        """Coarse- and fine-pressure DOFs removed from the solve.

        Where two faces with prescribed tangential velocity meet, div v
        vanishes on their intersection for every admissible v, so the coarse
        pressure DOFs there are not seen by the continuity equation.  They
        are pinned together with one interior DOF for the constant; the
        fine pressure only needs its constant pinned.
        """
        shape = self.layout.shapes["p"]
        idx = np.indices(shape).reshape(self.dim, -1).T
        tangential = [f for f, c in self.bc.faces.items() if c in (NO_SLIP, PRESCRIBED)]
        spurious = np.zeros(idx.shape[0], dtype=bool)
        for a, (k, s) in enumerate(tangential):
            for l, t in tangential[a + 1:]:
                if l == k:
                    continue
                on_k = idx[:, k] == (0 if s == 0 else shape[k] - 1)
                on_l = idx[:, l] == (0 if t == 0 else shape[l] - 1)
                spurious |= on_k & on_l
        center = np.ravel_multi_index(tuple(n // 2 for n in shape), shape)
        spurious[center] = True
        p_pins = self.layout.offsets["p"] + np.flatnonzero(spurious)
        return np.concatenate([p_pins, [self.layout.offsets["pp"]]]).astype(np.int64)

    @property
    def constrained(self) -> np.ndarray:
        return np.concatenate([self.velocity_constrained, self.pressure_pins])

    @cached_property
    def free(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[self.constrained] = False
        return np.flatnonzero(mask)

    def free_constant_velocity_components(self):
        """Components whose constant mode is admissible (no constrained DOFs)."""
        out = []
        for i, name in enumerate(self.velocity_names):
            blk = self.layout.block(name)
            c = self.velocity_constrained
            if not np.any((c >= blk.start) & (c < blk.stop)):
                out.append(i)
        return out

    # -- quadrature --------------------------------------------------------

    def quadrature(self, n_gp=None) -> CellQuadrature:
        n_gp = n_gp or self.k_prime + 2
        cache = self.__dict__.setdefault("_quad", {})
        if n_gp not in cache:
            cache[n_gp] = CellQuadrature(self.mesh, self.layout, n_gp, self.refinement, fine_fields=("pp",))
        return cache[n_gp]

    # -- auxiliary linear operators (numpy) ---------------------------------

    def velocity_mass(self, quad=None) -> sp.csr_matrix:
        quad = quad or self.quadrature()
        blocks = {}
        for n in self.velocity_names:
            N, _ = tensor_basis(np, quad.cell_tables(n), self.dim, order=0)
            blocks[(n, n)] = np.einsum("cq,cqa,cqb->cab", quad.w, N, N)
        return assemble_blocks(quad, blocks)

    def divergence_matrix(self, quad=None, pressure="p") -> sp.csr_matrix:
        """Rows ``q_j`` (field ``pressure``), columns velocity: ``int q_j div v``."""
        quad = quad or self.quadrature()
        Nq, _ = tensor_basis(np, quad.cell_tables(pressure), self.dim, order=0)
        blocks = {}
        for i, n in enumerate(self.velocity_names):
            _, dN = tensor_basis(np, quad.cell_tables(n), self.dim, order=1)
            blocks[(pressure, n)] = np.einsum("cq,cqa,cqb->cab", quad.w, Nq, dN[..., i])
        return assemble_blocks(quad, blocks)

    def interpolate_velocity(self, coef, quad=None, order=1):
        quad = quad or self.quadrature()
        full = self._as_full(coef)
        return quad.velocity(full, self.velocity_names, order)

    def _as_full(self, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.size == self.size:
            return coef
        if coef.size == self.n_velocity:
            return np.concatenate([coef, np.zeros(self.size - self.n_velocity)])
        raise InputError(f"coefficient vector of size {coef.size} matches neither velocity nor full layout")


def build_space(mesh: Mesh, k_prime: int, bc: BoundarySpec, fine_pressure_refinement: int = 0) -> DivConformingSpace:
    return DivConformingSpace(mesh, k_prime, bc, fine_pressure_refinement)


class MeanConstraint:
    """``m(q) = int q`` on a pressure field, and the zero-mean shift."""

    def __init__(self, space: DivConformingSpace, field_name="p"):
        quad = space.quadrature()
        blk = space.layout.block(field_name)
        ones = np.ones((quad.n_cells, quad.nq))
        self.weights = quad.load_vector(field_name, fv=ones)[blk]
        self.volume = space.mesh.volume
        self.block = blk

    def __call__(self, coef) -> float:
        return float(self.weights @ np.asarray(coef))

    def mean(self, coef) -> float:
        return self(coef) / self.volume

    def remove_mean(self, coef):
        # B-splines sum to one, so a constant shift acts on every coefficient
        return np.asarray(coef) - self.mean(coef)


def pressure_mean_constraint(space: DivConformingSpace, field_name="p") -> MeanConstraint:
    return MeanConstraint(space, field_name)


def remove_pressure_means(space: DivConformingSpace, x_full):
    x = np.array(x_full, dtype=float)
    for name in ("p", "pp"):
        blk = space.layout.block(name)
        x[blk] = pressure_mean_constraint(space, name).remove_mean(x[blk])
    return x


# -- solenoidal projection ------------------------------------------------


def _face_trace_projection(space: DivConformingSpace, k, side, g):
    """L2 projection of ``g.n`` onto the normal-trace space of face ``(k, side)``."""
    d = space.dim
    others = [j for j in range(d) if j != k]
    kvs = [space.kvs(f"u{k}")[j] for j in others]
    box = tuple(space.mesh.box[j] for j in others)
    nel = tuple(space.mesh.n_elements[j] for j in others)
    fmesh = Mesh(box, nel) if d == 3 else _Mesh1D(box[0], nel[0])
    coord = space.mesh.box[k][side]
    quad = CellQuadrature(fmesh, FieldLayout([("t", kvs)]), space.k_prime + 3)
    x = np.zeros(quad.x.shape[:2] + (d,))
    for slot, j in enumerate(others):
        x[..., j] = quad.x[..., slot]
    x[..., k] = coord
    gn = np.asarray(g(x))[..., k]
    N, _ = tensor_basis(np, quad.cell_tables("t"), len(others), order=0)
    M = assemble_blocks(quad, {("t", "t"): np.einsum("cq,cqa,cqb->cab", quad.w, N, N)})
    rhs = quad.load_vector("t", fv=gn)
    flux = quad.integrate(gn) * (1.0 if side == 1 else -1.0)
    scale = quad.integrate(np.abs(gn))
    return spla.spsolve(M.tocsc(), rhs), flux, scale


class _Mesh1D:
    """Minimal 1D mesh for face quadrature of 2D problems."""

    def __init__(self, interval, n):
        self.box = (tuple(interval),)
        self.n_elements = (n,)
        self.dim = 1
        self.h = ((interval[1] - interval[0]) / n,)


def _solenoidal_l2(space: DivConformingSpace, load, fixed_idx, fixed_val, quad=None):
    """argmin ||w||_M^2/2 - load.w over velocities with div w = 0 and fixed DOFs."""
    quad = quad or space.quadrature()
    nv = space.n_velocity
    M = space.velocity_mass(quad)[:nv, :nv]
    pblk = space.layout.block("p")
    B = space.divergence_matrix(quad)[pblk, :nv]
    free = np.setdiff1d(np.arange(nv), fixed_idx)
    w = np.zeros(nv)
    w[fixed_idx] = fixed_val
    rhs_u = load[free] - M[free][:, fixed_idx] @ w[fixed_idx]
    Bf = B[1:, :][:, free]  # constant mode is implied by zero net flux
    rhs_p = -(B[1:, :][:, fixed_idx] @ w[fixed_idx])
    K = sp.bmat([[M[free][:, free], Bf.T], [Bf, None]], format="csc")
    sol = spla.spsolve(K, np.concatenate([rhs_u, rhs_p]))
    w[free] = sol[: free.size]
    return w


def solenoidal_lifting(space: DivConformingSpace, velocity=None, rtol=1e-10):
    """Discretely (hence pointwise) divergence-free lifting of boundary data.

    Normal DOFs on every wall face take the face-wise L2 projection of
    ``g.n``; the remaining DOFs come from the L2 projection of ``g`` onto the
    solenoidal subspace.  Returns the velocity coefficient vector.
    """
    g = velocity if velocity is not None else space.bc.velocity
    nv = space.n_velocity
    if g is None:
        return np.zeros(nv)
    fixed_idx = [space.noslip_tangential_dofs]
    fixed_val = [np.zeros(space.noslip_tangential_dofs.size)]
    total_flux, scale = 0.0, 0.0
    for (k, s), cond in space.bc.faces.items():
        if cond == PERIODIC:
            continue
        nd = space.face_normal_dofs[(k, s)]
        if cond == PRESCRIBED:
            vals, flux, sc = _face_trace_projection(space, k, s, g)
            total_flux += flux
            scale += sc
        else:
            vals = np.zeros(nd.size)
        fixed_idx.append(nd)
        fixed_val.append(vals)
    if abs(total_flux) > max(rtol * scale, 1e-13):
        raise DataError(f"boundary data has net flux {total_flux:.3e}; a solenoidal lifting needs zero")
    idx = np.concatenate(fixed_idx)
    val = np.concatenate(fixed_val)
    idx, first = np.unique(idx, return_index=True)
    val = val[first]
    quad = space.quadrature()
    gq = np.asarray(g(quad.x))
    load = np.zeros(space.size)
    for i, n in enumerate(space.velocity_names):
        load += quad.load_vector(n, fv=gq[..., i])
    return _solenoidal_l2(space, load[:nv], idx, val, quad)


def solenoidal_projection(space: DivConformingSpace, coef):
    """L2 projection of a discrete velocity onto solenoidal fields with homogeneous constraints."""
    nv = space.n_velocity
    M = space.velocity_mass()[:nv, :nv]
    load = M @ np.asarray(coef)[:nv]
    idx = space.velocity_constrained
    return _solenoidal_l2(space, load, idx, np.zeros(idx.size))
