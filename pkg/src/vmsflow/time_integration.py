"""Implicit time stepping with subscale state advancement.

Checkpoint format (``.npz``, version 1): ``version`` (int), ``t`` (float),
``step`` (int), ``x`` (full coefficient vector ``[u_0..u_{d-1}, p, p']``),
``uprime`` (fine-scale velocity at quadrature points, ``(ncell, nq, d)``),
``layout`` (field sizes, int array) and ``dt`` (last step size).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .diagnostics import DiagnosticsRecord, dissipation_split, div_sup, kinetic_energy, total_energy, viscous_dissipation
from .errors import ConfigError, IOFailure, NonConvergenceError
from .forms import FluidParams, NavierStokesSystem, StabilizationConfig, StepData
from .solvers import LinearSolver, NonlinearSettings, nested_dissection, solve_nonlinear
from .spaces import DivConformingSpace, remove_pressure_means

log = logging.getLogger(__name__)

BACKWARD_EULER = "backward-euler"
MIDPOINT = "midpoint"
THETA = {BACKWARD_EULER: 1.0, MIDPOINT: 0.5}
CHECKPOINT_VERSION = 1
MAX_HALVINGS = 3


@dataclass(frozen=True)
class TimeSettings:
    dt: float
    T: float
    scheme: str = BACKWARD_EULER
    dt_proportional_to_h: bool = False
    h_ref: Optional[float] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.T >= self.dt * (1 - 1e-12):
            raise ConfigError("T must be at least dt")
        if self.scheme not in THETA:
            raise ConfigError(f"scheme must be one of {tuple(THETA)}")
        if self.dt_proportional_to_h and not (self.h_ref and self.h_ref > 0):
            raise ConfigError("dt proportional to h needs a positive h_ref")

    @property
    def theta(self):
        return THETA[self.scheme]

    def step_size(self, h):
        """``dt_ref * h / h_ref`` when proportional, else ``dt``; shrunk to divide ``T`` evenly."""
        dt = self.dt * h / self.h_ref if self.dt_proportional_to_h else self.dt
        n = self.n_steps(h)
        return self.T / n if abs(n * dt - self.T) > 1e-12 * self.T else dt

    def n_steps(self, h):
        dt = self.dt * h / self.h_ref if self.dt_proportional_to_h else self.dt
        return max(1, math.ceil(self.T / dt - 1e-9))


def default_linear_solver(space: DivConformingSpace, free=None) -> LinearSolver:
    """Direct factorization per Newton step in 2D; lagged, reordered factorization in 3D."""
    free = space.free if free is None else free
    if space.dim < 3 and free.size < 40000:
        return LinearSolver("direct")
    reach = 0.5 * (space.k_prime + 2) * np.asarray(space.mesh.h)
    perm = nested_dissection(space.dof_points()[free], reach)
    return LinearSolver("lagged", perm)


@dataclass
class TransientResult:
    records: list
    x: np.ndarray
    uprime: np.ndarray
    t: float
    E_k0: float
    total_energy: list = field(default_factory=list)


class TransientSolver:
    """Advances ``(u^h, p^h, p')`` and the stored subscale through time."""

    def __init__(self, space: DivConformingSpace, fluid: FluidParams, stab: StabilizationConfig = StabilizationConfig(),
                 scheme: str = BACKWARD_EULER, nonlinear: NonlinearSettings = NonlinearSettings(),
                 linear: Optional[LinearSolver] = None):
        if scheme not in THETA:
            raise ConfigError(f"scheme must be one of {tuple(THETA)}")
        self.space, self.fluid, self.stab = space, fluid, stab
        self.scheme = scheme
        self.system = NavierStokesSystem(space, fluid, stab, theta=THETA[scheme])
        self.nonlinear = nonlinear
        self.linear = linear or default_linear_solver(space)
        self.quad = space.quadrature()

    def _solve_step(self, x_old, uprime_old, t, dt):
        st = StepData(x_old, uprime_old, t, dt)
        free = self.space.free

        def provider(xf):
            x = x_old.copy()
            x[free] = xf
            A, R, _ = self.system.linearize(x, st)
            return R, A

        def residual(xf):
            x = x_old.copy()
            x[free] = xf
            return self.system.residual(x, st)[0]

        rep = solve_nonlinear(provider, x_old[free], self.nonlinear, self.linear, residual)
        x = x_old.copy()
        x[free] = rep.x
        up_new, _ = self.system.subscales(x, st)
        return remove_pressure_means(self.space, x), up_new, rep

    def step(self, x_old, uprime_old, t, dt, halvings=MAX_HALVINGS):
        """One step of size ``dt``; on nonconvergence retried as two half steps.

        Returns ``(x, uprime, records)``: one record per accepted (sub)step.
        """
        if uprime_old is None:
            uprime_old = np.zeros((self.quad.n_cells, self.quad.nq, self.space.dim))
        try:
            x, up, rep = self._solve_step(x_old, uprime_old, t, dt)
        except NonConvergenceError:
            if halvings <= 0:
                raise
            log.warning("step at t=%.6g with dt=%.3g failed; halving", t, dt)
            x1, up1, rec1 = self.step(x_old, uprime_old, t, 0.5 * dt, halvings - 1)
            x2, up2, rec2 = self.step(x1, up1, t + 0.5 * dt, 0.5 * dt, halvings - 1)
            return x2, up2, rec1 + rec2
        rec = DiagnosticsRecord(
            t=t + dt,
            E_k=kinetic_energy(self.space, x, self.quad),
            eps_resolved=viscous_dissipation(self.space, x, self.fluid.nu, self.quad),
            div_max=div_sup(self.space, x, self.quad),
            newton_iters=rep.iterations,
            assumption2_violated=self.system.assumption2_violated,
        )
        return x, up, [rec]

    def run(self, x0, settings: TimeSettings, uprime0=None, t0=0.0, callback: Optional[Callable] = None,
            checkpoint: Optional[Path] = None, n_steps: Optional[int] = None):
        """Integrate from ``t0`` to ``settings.T``; returns a :class:`TransientResult`."""
        h = self.space.mesh.h_max
        dt = settings.step_size(h)
        n = settings.n_steps(h) if n_steps is None else n_steps
        x = np.array(x0, dtype=float)
        up = np.zeros((self.quad.n_cells, self.quad.nq, self.space.dim)) if uprime0 is None else np.array(uprime0)
        E0 = kinetic_energy(self.space, x, self.quad)
        eps0 = viscous_dissipation(self.space, x, self.fluid.nu, self.quad)
        energies = [total_energy(self.space, x, up, self.quad)]
        records = []
        t = t0
        start = int(round(t0 / dt))
        for k in range(start, n):
            x, up, recs = self.step(x, up, t, dt)
            t = (k + 1) * dt
            records.extend(recs)
            energies.append(total_energy(self.space, x, up, self.quad))
            if callback is not None:
                callback(recs[-1], x, up)
            log.info("t=%.4f E_k=%.6e iters=%d", t, recs[-1].E_k, recs[-1].newton_iters)
        _fill_dissipation(records, t0, E0, eps0)
        if checkpoint is not None:
            save_checkpoint(checkpoint, self.space, x, up, t, len(records), dt)
        return TransientResult(records, x, up, t, E0, energies)


def _fill_dissipation(records, t0, E0, eps0):
    if not records:
        return
    t = [t0] + [r.t for r in records]
    E = [E0] + [r.E_k for r in records]
    res = [eps0] + [r.eps_resolved for r in records]
    total, model = dissipation_split(t, E, res)
    for r, tot, mod in zip(records, total[1:], model[1:]):
        r.eps_total = float(tot)
        r.eps_model = float(mod)


def save_checkpoint(path, space: DivConformingSpace, x, uprime, t, step, dt):
    path = Path(path)
    sizes = np.array([space.layout.sizes[n] for n in space.layout.names], dtype=np.int64)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, version=CHECKPOINT_VERSION, t=float(t), step=int(step), x=np.asarray(x),
                     uprime=np.asarray(uprime), layout=sizes, dt=float(dt))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, space: Optional[DivConformingSpace] = None):
    """Returns a dict with ``t, step, x, uprime, dt``; validates the layout against ``space``."""
    path = Path(path)
    try:
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if int(data.get("version", -1)) != CHECKPOINT_VERSION:
        raise IOFailure(f"{path}: unsupported checkpoint version {data.get('version')}")
    if space is not None:
        sizes = np.array([space.layout.sizes[n] for n in space.layout.names])
        if not np.array_equal(sizes, data["layout"]):
            raise IOFailure(f"{path}: checkpoint layout does not match the space")
    return {"t": float(data["t"]), "step": int(data["step"]), "x": data["x"], "uprime": data["uprime"],
            "dt": float(data["dt"])}


def solve_steady(space: DivConformingSpace, fluid: FluidParams, stab: StabilizationConfig = StabilizationConfig(),
                 boundary_velocity=None, nonlinear: NonlinearSettings = NonlinearSettings(), x0=None,
                 linear: Optional[LinearSolver] = None):
    """Newton solve of the steady problem with quasi-static subscales.

    ``boundary_velocity`` is a full-length or velocity-length coefficient
    vector whose constrained entries are imposed.  Returns ``(x, report)``.
    """
    system = NavierStokesSystem(space, fluid, stab, steady=True)
    x = np.zeros(space.size) if x0 is None else np.array(x0, dtype=float)
    if boundary_velocity is not None:
        bv = np.asarray(boundary_velocity, dtype=float)
        c = space.velocity_constrained
        x[c] = bv[c]
    free = space.free
    linear = linear or default_linear_solver(space)

    def provider(xf):
        y = x.copy()
        y[free] = xf
        A, R, _ = system.linearize(y)
        return R, A

    rep = solve_nonlinear(provider, x[free], nonlinear, linear)
    x[free] = rep.x
    return remove_pressure_means(space, x), rep
