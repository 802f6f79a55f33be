"""Univariate and tensor-product B-spline evaluation.

Knots are stored in physical coordinates, so derivatives returned here are
already physical derivatives for the axis-aligned boxes this package works on.
Only uniform knot vectors are constructed, either clamped (open) or periodic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError

MAX_DEGREE = 3


@dataclass(frozen=True)
class KnotVector:
    """A uniform clamped or periodic knot vector.

    For a periodic vector the knot sequence is extended by ``degree`` spans on
    both sides of the interval, and function ``j`` is identified with
    ``j + n_elements``.
    """

    knots: np.ndarray
    degree: int
    periodic: bool = False
    n_elements: int = field(init=False)
    interval: tuple[float, float] = field(init=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        p = self.degree
        if p < 0 or p > MAX_DEGREE:
            raise InputError(f"degree must be in [0, {MAX_DEGREE}], got {p}")
        if knots.ndim != 1 or knots.size < 2 * p + 2:
            raise InputError("knot vector too short for its degree")
        if np.any(np.diff(knots) < 0):
            raise InputError("knots must be nondecreasing")
        _, counts = np.unique(knots, return_counts=True)
        if counts.max() > p + 1:
            raise InputError("knot multiplicity exceeds degree + 1")
        a, b = knots[p], knots[-p - 1]
        if not b > a:
            raise InputError("degenerate parametric interval")
        if not self.periodic:
            if np.any(knots[: p + 1] != a) or np.any(knots[-p - 1 :] != b):
                raise InputError("open knot vector must be clamped at both ends")
        else:
            spans = np.diff(knots)
            n = knots.size - 2 * p - 1
            if n <= p:
                raise InputError("periodic knot vector needs n_elements > degree")
            inner = spans[p : p + n]
            if p > 0 and not (
                np.allclose(spans[:p], inner[-p:]) and np.allclose(spans[-p:], inner[:p])
            ):
                raise InputError("periodic knot extension does not match the period")
        interior = np.unique(knots[p : knots.size - p])
        object.__setattr__(self, "n_elements", interior.size - 1)
        object.__setattr__(self, "interval", (float(a), float(b)))

    @property
    def period(self) -> float:
        return self.interval[1] - self.interval[0]

    @property
    def h(self) -> float:
        """Element size (knots are uniform)."""
        return self.period / self.n_elements

    @property
    def n_functions(self) -> int:
        """Number of B-splines before periodic identification."""
        return self.knots.size - self.degree - 1

    @property
    def dim(self) -> int:
        """Number of independent DOFs."""
        return self.n_elements if self.periodic else self.n_elements + self.degree

    def dof_index(self, j):
        """Map B-spline index (possibly an array) to its DOF index."""
        return np.mod(j, self.n_elements) if self.periodic else j

    def element_of(self, x: float) -> int:
        a, b = self.interval
        if self.periodic:
            x = a + np.mod(x - a, b - a)
        elif x < a - 1e-12 * (b - a) or x > b + 1e-12 * (b - a):
            raise DomainError(f"x={x} outside [{a}, {b}]")
        e = int(np.floor((x - a) / self.h))
        return min(max(e, 0), self.n_elements - 1)

    def greville(self) -> np.ndarray:
        p = self.degree
        if p == 0:
            g = 0.5 * (self.knots[:-1] + self.knots[1:])
        else:
            g = np.array([self.knots[i + 1 : i + p + 1].mean() for i in range(self.n_functions)])
        return g[: self.dim]


def open_knot_vector(degree: int, n_elements: int, interval=(0.0, 1.0)) -> KnotVector:
    """Uniform clamped knot vector with ``n_elements`` nonzero spans."""
    a, b = map(float, interval)
    if n_elements < 1 or degree < 0 or not b > a:
        raise InputError("need degree >= 0, n_elements >= 1 and a < b")
    inner = np.linspace(a, b, n_elements + 1)
    knots = np.concatenate([[a] * degree, inner, [b] * degree])
    return KnotVector(knots, degree, periodic=False)


def periodic_knot_vector(degree: int, n_elements: int, interval=(0.0, 1.0)) -> KnotVector:
    """Uniform knots on ``interval`` extended by ``degree`` spans on each side."""
    a, b = map(float, interval)
    if n_elements <= degree:
        raise InputError(
            f"periodic space of degree {degree} needs more than {degree} elements"
        )
    if not b > a:
        raise InputError("degenerate interval")
    h = (b - a) / n_elements
    knots = a + h * np.arange(-degree, n_elements + degree + 1)
    return KnotVector(knots, degree, periodic=True)


@dataclass(frozen=True)
class BasisEval:
    span: int
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    @property
    def first(self) -> int:
        """Index of the first active B-spline."""
        return self.span - (self.values.size - 1)


def _ders_basis_funs(span: int, x: float, p: int, U: np.ndarray, n: int) -> np.ndarray:
    # Piegl & Tiller, algorithm A2.3
    ndu = np.zeros((p + 1, p + 1))
    ndu[0, 0] = 1.0
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    for j in range(1, p + 1):
        left[j] = x - U[span + 1 - j]
        right[j] = U[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    ders = np.zeros((n + 1, p + 1))
    ders[0] = ndu[:, p]
    a = np.zeros((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, n + 1):
            d = 0.0
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    fac = p
    for k in range(1, n + 1):
        ders[k] *= fac
        fac *= p - k
    return ders


def eval_basis_in_element(kv: KnotVector, element: int, x: float, max_deriv: int = 2) -> np.ndarray:
    """Derivatives ``(max_deriv+1, degree+1)`` of the functions active on ``element``.

    ``x`` may lie outside the element; the element's polynomial pieces are
    then extrapolated, which is what sub-element quadrature needs at the
    element boundary.
    """
    p = kv.degree
    n = min(max_deriv, p)
    ders = _ders_basis_funs(element + p, float(x), p, kv.knots, n)
    if n < max_deriv:
        ders = np.vstack([ders, np.zeros((max_deriv - n, p + 1))])
    return ders


def eval_basis(kv: KnotVector, x: float, max_deriv: int = 2) -> BasisEval:
    """Values and derivatives (up to order two) of the B-splines active at ``x``."""
    if not 0 <= max_deriv <= 2:
        raise InputError("max_deriv must be 0, 1 or 2")
    a, b = kv.interval
    if kv.periodic:
        x = a + np.mod(x - a, b - a)
    e = kv.element_of(x)
    ders = eval_basis_in_element(kv, e, x, 2)
    if max_deriv < 2:
        ders[max_deriv + 1 :] = 0.0
    return BasisEval(span=e + kv.degree, values=ders[0], d1=ders[1], d2=ders[2])


@dataclass(frozen=True)
class TensorBasisEval:
    indices: np.ndarray  # (nloc, dim) univariate DOF indices per direction
    values: np.ndarray  # (nloc,)
    grad: np.ndarray  # (nloc, dim)
    hess: np.ndarray  # (nloc, dim, dim)


def tensor_eval(kvs, point, max_deriv: int = 2) -> TensorBasisEval:
    """Tensor-product basis values, gradients and Hessians at ``point``.

    Local functions are ordered C-style over the per-direction local indices.
    """
    dim = len(kvs)
    evals = [eval_basis(kv, x, max_deriv) for kv, x in zip(kvs, point)]
    tabs = [np.stack([ev.values, ev.d1, ev.d2]) for ev in evals]
    idx1 = [kv.dof_index(ev.first + np.arange(kv.degree + 1)) for kv, ev in zip(kvs, evals)]
    indices = np.array(list(itertools.product(*idx1)), dtype=int).reshape(-1, dim)

    def product(orders):
        out = np.ones(1)
        for t, o in zip(tabs, orders):
            out = np.multiply.outer(out, t[o]).reshape(-1)
        return out

    values = product([0] * dim)
    grad = np.zeros((values.size, dim))
    hess = np.zeros((values.size, dim, dim))
    for i in range(dim):
        grad[:, i] = product([1 if j == i else 0 for j in range(dim)])
        for k in range(dim):
            orders = [0] * dim
            orders[i] += 1
            orders[k] += 1
            hess[:, i, k] = product(orders)
    return TensorBasisEval(indices=indices, values=values, grad=grad, hess=hess)


def element_tables(kv: KnotVector, cell_elements: np.ndarray, points: np.ndarray):
    """Tabulate active functions of ``cell_elements[c]`` at ``points[c]``.

    Returns ``(tables, dofs)`` with ``tables`` of shape
    ``(ncell, npts, degree+1, 3)`` (value, first, second derivative) and
    ``dofs`` of shape ``(ncell, degree+1)``.
    """
    ncell, npts = points.shape
    p = kv.degree
    tables = np.zeros((ncell, npts, p + 1, 3))
    dofs = np.zeros((ncell, p + 1), dtype=np.int64)
    cache: dict[tuple[int, bytes], np.ndarray] = {}
    for c in range(ncell):
        e = int(cell_elements[c])
        # uniform knots: tables depend only on the offset inside the element
        # and on the element's distance to a clamped end
        local = points[c] - kv.knots[e + p]
        boundary = not kv.periodic and (e < p or e >= kv.n_elements - p)
        key = (e if boundary else -1, np.round(local / kv.h, 13).tobytes())
        if key not in cache:
            cache[key] = np.stack(
                [eval_basis_in_element(kv, e, x, 2).T for x in points[c]]
            )
        tables[c] = cache[key]
        dofs[c] = kv.dof_index(e + np.arange(p + 1))
    return tables, dofs
