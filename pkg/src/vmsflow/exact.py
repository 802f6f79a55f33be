"""Closed-form flow fields with exact derivatives.

Arrays of points have shape ``(..., d)``; velocity gradients are returned as
``[..., i, j] = du_i/dx_j`` and Hessians as ``[..., i, j, k]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P


def _pd(c, x, k):
    return P.polyval(x, P.polyder(c, k)) if k else P.polyval(x, c)


@dataclass(frozen=True)
class SeparableStreamFunction:
    """2D velocity ``curl psi`` with ``psi = scale * X(x) Y(y)``, and ``p = sin(pi x) sin(pi y)``.

    ``X`` and ``Y`` are power-series coefficient arrays (lowest degree first).
    """

    X: tuple
    Y: tuple
    scale: float = 1.0

    def _xy(self, pts, i, j):
        x, y = pts[..., 0], pts[..., 1]
        return self.scale * _pd(self.X, x, i) * _pd(self.Y, y, j)

    def velocity(self, pts):
        # u = (d psi/dy, -d psi/dx)
        return np.stack([self._xy(pts, 0, 1), -self._xy(pts, 1, 0)], axis=-1)

    def grad(self, pts):
        a = self._xy
        g0 = np.stack([a(pts, 1, 1), a(pts, 0, 2)], axis=-1)
        g1 = np.stack([-a(pts, 2, 0), -a(pts, 1, 1)], axis=-1)
        return np.stack([g0, g1], axis=-2)

    def hessian(self, pts):
        a = self._xy
        h0 = np.stack([np.stack([a(pts, 2, 1), a(pts, 1, 2)], -1), np.stack([a(pts, 1, 2), a(pts, 0, 3)], -1)], -2)
        h1 = np.stack([np.stack([-a(pts, 3, 0), -a(pts, 2, 1)], -1), np.stack([-a(pts, 2, 1), -a(pts, 1, 2)], -1)], -2)
        return np.stack([h0, h1], axis=-3)

    def laplacian(self, pts):
        return np.einsum("...ijj->...i", self.hessian(pts))

    @staticmethod
    def pressure(pts):
        return np.sin(np.pi * pts[..., 0]) * np.sin(np.pi * pts[..., 1])

    @staticmethod
    def pressure_grad(pts):
        x, y = pts[..., 0], pts[..., 1]
        return np.pi * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y), np.sin(np.pi * x) * np.cos(np.pi * y)], -1)

    def navier_stokes_source(self, nu):
        """Steady source ``u.grad u - nu lap u + grad p``."""
        def f(pts, t=0.0):
            u = self.velocity(pts)
            return np.einsum("...ij,...j->...i", self.grad(pts), u) - nu * self.laplacian(pts) + self.pressure_grad(pts)
        return f

    def oseen_source(self, nu, a):
        a = np.asarray(a, dtype=float)

        def f(pts, t=0.0):
            return np.einsum("...ij,j->...i", self.grad(pts), a) - nu * self.laplacian(pts) + self.pressure_grad(pts)
        return f


# x^2 (1 - x)^2 and y^4 - y^2
QUARTIC_BUMP = (0.0, 0.0, 1.0, -2.0, 1.0)
CAVITY_Y = (0.0, 0.0, -1.0, 0.0, 1.0)

# regularized cavity: u = 8 (x^4 - 2x^3 + x^2)(4y^3 - 2y) e1 - 8 (4x^3 - 6x^2 + 2x)(y^4 - y^2) e2
CAVITY = SeparableStreamFunction(QUARTIC_BUMP, CAVITY_Y, 8.0)
# psi = x^2 (1-x)^2 y^2 (1-y)^2
OSEEN_BUMP = SeparableStreamFunction(QUARTIC_BUMP, QUARTIC_BUMP, 1.0)


@dataclass(frozen=True)
class TaylorGreen2D:
    """Decaying vortex array on ``(0, 2 pi)^2``."""

    nu: float

    def velocity(self, pts, t=0.0):
        x, y = pts[..., 0], pts[..., 1]
        F = np.exp(-2 * self.nu * t)
        return F * np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)], -1)

    def grad(self, pts, t=0.0):
        x, y = pts[..., 0], pts[..., 1]
        F = np.exp(-2 * self.nu * t)
        g0 = np.stack([np.cos(x) * np.cos(y), -np.sin(x) * np.sin(y)], -1)
        g1 = np.stack([np.sin(x) * np.sin(y), -np.cos(x) * np.cos(y)], -1)
        return F * np.stack([g0, g1], -2)

    def pressure(self, pts, t=0.0):
        x, y = pts[..., 0], pts[..., 1]
        return 0.25 * (np.cos(2 * x) + np.cos(2 * y)) * np.exp(-4 * self.nu * t)


def taylor_green_3d(pts):
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    return np.stack([np.sin(x) * np.cos(y) * np.cos(z), -np.cos(x) * np.sin(y) * np.cos(z), np.zeros_like(x)], -1)


def taylor_green_3d_grad(pts):
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    sx, cx, sy, cy, sz, cz = np.sin(x), np.cos(x), np.sin(y), np.cos(y), np.sin(z), np.cos(z)
    g0 = np.stack([cx * cy * cz, -sx * sy * cz, -sx * cy * sz], -1)
    g1 = np.stack([sx * sy * cz, -cx * cy * cz, cx * sy * sz], -1)
    g2 = np.zeros_like(g0)
    return np.stack([g0, g1, g2], -2)
