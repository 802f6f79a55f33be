"""Sparse direct solves and the Newton loop."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NonConvergenceError, NumericalError, SolverError

log = logging.getLogger(__name__)

SINGULAR_HINT = (
    "matrix is singular; the usual cause is an unpinned pressure constant "
    "or a velocity mode left free by the boundary conditions"
)


@dataclass(frozen=True)
class NonlinearSettings:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_iters: int = 20
    relaxation: float = 1.0

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ConfigError("nonlinear tolerances must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if not 0 < self.relaxation <= 1:
            raise ConfigError("relaxation must lie in (0, 1]")


@dataclass
class NewtonReport:
    x: np.ndarray
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = True


def nested_dissection(points, reach, leaf=200):
    """Geometric nested-dissection ordering of unknowns located at ``points``.

    Unknowns closer than ``reach`` (per direction) to a cutting plane form
    the separator, ordered after both halves.  Unknowns coupled by the
    matrix must lie within ``2 * reach`` of each other.
    """
    points = np.asarray(points, dtype=float)
    reach = np.broadcast_to(np.asarray(reach, dtype=float), points.shape[1:])
    out = []

    def split(idx):
        if idx.size <= leaf:
            out.append(idx)
            return
        P = points[idx]
        ext = (P.max(axis=0) - P.min(axis=0)) / reach
        k = int(np.argmax(ext))
        if ext[k] <= 4:
            out.append(idx)
            return
        mid = np.median(P[:, k])
        sep = np.abs(P[:, k] - mid) < reach[k]
        split(idx[(P[:, k] < mid) & ~sep])
        split(idx[(P[:, k] >= mid) & ~sep])
        out.append(idx[sep])

    split(np.arange(points.shape[0]))
    return np.concatenate(out)


class Factorization:
    """Sparse LU of a square matrix; call with a right-hand side to solve.

    With ``perm`` the matrix is symmetrically permuted and factored without
    further column reordering.
    """

    def __init__(self, A, perm=None):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise SolverError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.perm = perm
        if A.shape[0] == 0:
            self._lu = None
            return
        if not np.all(np.isfinite(A.data)):
            raise NumericalError("matrix has non-finite entries")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                if perm is None:
                    self._lu = spla.splu(A)
                else:
                    B = A[perm][:, perm].tocsc()
                    self._lu = spla.splu(B, permc_spec="NATURAL", diag_pivot_thresh=0.1)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise SolverError(f"{SINGULAR_HINT} ({exc})") from exc

    def __call__(self, b):
        b = np.asarray(b, dtype=float)
        if self._lu is None:
            return b.copy()
        if self.perm is None:
            x = self._lu.solve(b)
        else:
            x = np.empty_like(b)
            x[self.perm] = self._lu.solve(b[self.perm])
        if not np.all(np.isfinite(x)):
            raise SolverError(SINGULAR_HINT)
        return x


def _refined(lu, A, b, rtol, refine):
    x = lu(b)
    nb = np.linalg.norm(b)
    if nb == 0:
        return x, 0.0
    r = b - A @ x
    for _ in range(refine):
        if np.linalg.norm(r) <= rtol * nb:
            break
        x = x + lu(r)
        r = b - A @ x
    return x, np.linalg.norm(r) / nb


def solve_linear(A, b, rtol=1e-10, refine=2, perm=None):
    """Direct solve with a residual check ``||Ax - b|| <= rtol ||b||``.

    A couple of iterative-refinement sweeps absorb pivoting round-off on
    badly scaled saddle-point systems.
    """
    b = np.asarray(b, dtype=float)
    lu = Factorization(A, perm)
    x, res = _refined(lu, lu.A, b, rtol, refine)
    if not res <= rtol:
        raise SolverError(f"linear residual {res:.3e} exceeds {rtol:.1e}; {SINGULAR_HINT}")
    return x


class LinearSolver:
    """Linear solves inside Newton.

    ``direct`` factors every matrix.  ``lagged`` keeps the last factorization
    as a GMRES preconditioner and refactors only when ``max_cycles``
    residual-corrected cycles of ``max_krylov`` iterations fail, which pays
    off for large 3D systems whose Jacobian drifts slowly between Newton
    iterations and time steps.
    """

    def __init__(self, strategy="direct", perm=None, rtol=1e-10, max_krylov=30, max_cycles=3):
        if strategy not in ("direct", "lagged"):
            raise ConfigError(f"unknown linear strategy {strategy!r}")
        self.strategy = strategy
        self.perm = perm
        self.rtol = rtol
        self.max_krylov = max_krylov
        self.max_cycles = max_cycles
        self._lu = None
        self._matrix = None
        self.n_factorizations = 0
        self.krylov_iterations = 0

    def factor(self, A):
        self._matrix = A
        self._lu = Factorization(A, self.perm)
        self.n_factorizations += 1
        return self._lu

    def solve(self, A, b):
        b = np.asarray(b, dtype=float)
        if A is self._matrix or self.strategy == "direct" or self._lu is None or self._lu.A.shape != A.shape:
            lu = self._lu if A is self._matrix else self.factor(A)
            x, res = _refined(lu, lu.A, b, self.rtol, 2)
            if not res <= self.rtol:
                raise SolverError(f"linear residual {res:.3e} exceeds {self.rtol:.1e}; {SINGULAR_HINT}")
            return x
        nb = np.linalg.norm(b)
        if nb == 0:
            return np.zeros_like(b)
        M = spla.LinearOperator(A.shape, matvec=self._lu, dtype=float)
        count = [0]

        def cb(_):
            count[0] += 1

        x = np.zeros_like(b)
        for _ in range(self.max_cycles):
            dx, _ = spla.gmres(A, b - A @ x, M=M, rtol=self.rtol, atol=0.0, restart=self.max_krylov,
                               maxiter=1, callback=cb, callback_type="pr_norm")
            x += dx
            if np.linalg.norm(b - A @ x) <= self.rtol * nb:
                break
        self.krylov_iterations += count[0]
        if not np.linalg.norm(b - A @ x) <= self.rtol * nb * 10:
            log.debug("lagged preconditioner stale after %d iterations; refactoring", count[0])
            self._lu = None
            return self.solve(A, b)
        return x


def solve_nonlinear(provider: Callable, x0, settings: NonlinearSettings = NonlinearSettings(),
                    linear: Optional[LinearSolver] = None, residual: Optional[Callable] = None,
                    contraction=0.25) -> NewtonReport:
    """Newton's method on ``R(x) = 0``.

    ``provider(x)`` returns ``(R, J)``.  If the cheaper ``residual(x)`` is
    given, the Jacobian is kept across iterations (chord updates) while each
    step reduces ``||R||`` by at least ``contraction``, and rebuilt otherwise.
    Stops when ``||R|| <= max(rel_tol ||R_0||, abs_tol)``; raises
    :class:`NonConvergenceError` carrying the residual history otherwise.
    """
    x = np.array(x0, dtype=float)
    history = []
    R0 = None
    J = None
    for it in range(settings.max_iters + 1):
        if residual is None or J is None:
            R, J = provider(x)
        else:
            R = residual(x)
        nr = float(np.linalg.norm(R))
        if not np.isfinite(nr):
            raise NonConvergenceError(f"non-finite residual at iteration {it}", history)
        history.append(nr)
        if R0 is None:
            R0 = nr
        log.debug("newton %d |R|=%.3e", it, nr)
        if nr <= max(settings.rel_tol * R0, settings.abs_tol):
            return NewtonReport(x, it, history, True)
        if it == settings.max_iters:
            break
        if residual is not None and it > 0 and nr > contraction * history[-2]:
            R, J = provider(x)
        if sp.issparse(J):
            dx = (linear or LinearSolver()).solve(J, R)
        else:
            dx = np.linalg.solve(np.atleast_2d(J), np.atleast_1d(R)).reshape(np.shape(R))
        x = x - settings.relaxation * dx
    raise NonConvergenceError(
        f"Newton did not converge in {settings.max_iters} iterations (|R| {history[0]:.3e} -> {history[-1]:.3e})",
        history,
    )
