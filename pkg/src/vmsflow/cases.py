"""Benchmark case drivers: lid-driven cavity, 2D/3D Taylor-Green, Oseen study.

Each driver takes a :class:`CaseConfig` and returns a :class:`CaseResult`;
files land in ``cfg.output_path`` as ``<case>_<k'>_<nelem>.csv`` (time
series), ``..._summary.json``, ``..._meta.json`` (config echo, version,
wall time) and, for studies, ``<case>_<k'>_rates.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import CaseConfig
from .diagnostics import (DiagnosticsRecord, accurate_quadrature, div_sup, h1_seminorm_error, kinetic_energy,
                          l2_error, sample_field, viscous_dissipation, write_csv)
from .errors import ConfigError, IOFailure, NumericalError
from .exact import CAVITY, TaylorGreen2D, taylor_green_3d, taylor_green_3d_grad
from .forms import FluidParams, StabilizationConfig, stokes_projector
from .oseen import OseenCase, fitted_rate, oseen_errors, run_convergence_study
from .solvers import NonlinearSettings
from .spaces import FREE_SLIP, PERIODIC, PRESCRIBED, BoundarySpec, Mesh, build_space, solenoidal_lifting
from .time_integration import TimeSettings, TransientSolver, load_checkpoint, save_checkpoint, solve_steady

log = logging.getLogger(__name__)

TGV2D_LENGTH = 2 * math.pi
TGV3D_LENGTH = math.pi
DIV_TOL = 1e-9
CHECKPOINT_EVERY = 20


@dataclass
class CaseResult:
    case: str
    summary: dict
    records: list = field(default_factory=list)
    files: list = field(default_factory=list)


def check_divergence(div_max, h, U=1.0):
    """Pointwise mass conservation: ``max |div u^h| <= 1e-9 U / h``."""
    if not div_max <= DIV_TOL * U / h:
        raise NumericalError(f"max |div u| = {div_max:.3e} exceeds {DIV_TOL * U / h:.3e}")


def _stab(cfg: CaseConfig):
    return StabilizationConfig(cfg.C_inv, cfg.model, cfg.tau_C_rule)


def _nonlinear(cfg: CaseConfig):
    return NonlinearSettings(cfg.rel_tol, cfg.abs_tol, cfg.max_iters, cfg.relaxation)


def _stem(cfg: CaseConfig, n):
    return f"{cfg.case}_{cfg.k_prime}_{n}"


def _write_json(path, data):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def _finish(cfg, n, space, x, records, summary):
    out = cfg.output_path
    stem = _stem(cfg, n)
    files = []
    if records:
        files.append(write_csv(records, out / f"{stem}.csv"))
    if cfg.sample_points:
        files.append(out / f"{stem}_u.csv")
        sample_field(space, x, "u", cfg.sample_points, files[-1])
    summary = {"case": cfg.case, "k_prime": cfg.k_prime, "n_elements": n, **summary}
    files.append(_write_json(out / f"{stem}_summary.json", summary))
    _write_json(out / f"{stem}_meta.json", _metadata(cfg))
    return CaseResult(cfg.case, summary, records, files)


# --- lid-driven cavity (regularized, manufactured) ---------------------------

def cavity_space(n, k_prime, refinement=0):
    return build_space(Mesh.uniform(2, n), k_prime, BoundarySpec.uniform(2, PRESCRIBED, CAVITY.velocity), refinement)


def solve_cavity(n, k_prime, nu, stab=StabilizationConfig(), nonlinear=NonlinearSettings(), refinement=0):
    """Steady cavity with the manufactured source; returns ``(space, x, report)``."""
    space = cavity_space(n, k_prime, refinement)
    lift = solenoidal_lifting(space)
    fluid = FluidParams(nu, CAVITY.navier_stokes_source(nu))
    x, rep = solve_steady(space, fluid, stab, boundary_velocity=lift, nonlinear=nonlinear)
    return space, x, rep


def cavity_errors(space, x):
    q = accurate_quadrature(space)
    return h1_seminorm_error(space, x, CAVITY.grad, q), l2_error(space, x, CAVITY.velocity, q)


def run_ldc(cfg: CaseConfig, n=None) -> CaseResult:
    n = n or cfg.n_elements
    nu = cfg.viscosity
    space, x, rep = solve_cavity(n, cfg.k_prime, nu, _stab(cfg), _nonlinear(cfg), cfg.refinement)
    dmax = div_sup(space, x)
    check_divergence(dmax, space.mesh.h_max)
    h1, l2 = cavity_errors(space, x)
    rec = DiagnosticsRecord(0.0, kinetic_energy(space, x), eps_resolved=viscous_dissipation(space, x, nu),
                            div_max=dmax, newton_iters=rep.iterations)
    return _finish(cfg, n, space, x, [rec], {"nu": nu, "h": space.mesh.h_max, "h1_error": h1, "l2_error": l2,
                                            "newton_iters": rep.iterations, "div_max": dmax})


# --- 2D Taylor-Green vortex --------------------------------------------------

def tgv2d_space(n, k_prime, refinement=0):
    return build_space(Mesh.uniform(2, n, (0.0, TGV2D_LENGTH)), k_prime, BoundarySpec.periodic(2), refinement)


def tgv2d_settings(cfg: CaseConfig):
    """``dt`` fixed when given, else ``dt_ref * h / h_ref`` with ``h_ref`` the 8-element spacing."""
    if cfg.dt is not None:
        return TimeSettings(cfg.dt, cfg.T, cfg.scheme)
    return TimeSettings(cfg.dt_ref, cfg.T, cfg.scheme, True, TGV2D_LENGTH / 8)


def solve_tgv2d(n, k_prime, nu, settings: TimeSettings, stab=StabilizationConfig(), nonlinear=NonlinearSettings(),
                refinement=0, callback=None):
    space = tgv2d_space(n, k_prime, refinement)
    exact = TaylorGreen2D(nu)
    x0 = stokes_projector(space, (exact.velocity, exact.grad, exact.pressure), nu=nu, stab=stab)
    solver = TransientSolver(space, FluidParams(nu), stab, settings.scheme, nonlinear)
    return space, solver.run(x0, settings, callback=callback)


def tgv2d_errors(space, x, nu, t):
    exact = TaylorGreen2D(nu)
    q = accurate_quadrature(space)
    return (h1_seminorm_error(space, x, lambda p: exact.grad(p, t), q),
            l2_error(space, x, lambda p: exact.velocity(p, t), q))


def _div_callback(h):
    def cb(rec, x, up):
        check_divergence(rec.div_max, h)
    return cb


def run_tgv2d(cfg: CaseConfig, n=None) -> CaseResult:
    n = n or cfg.n_elements
    nu = cfg.viscosity
    settings = tgv2d_settings(cfg)
    space, res = solve_tgv2d(n, cfg.k_prime, nu, settings, _stab(cfg), _nonlinear(cfg), cfg.refinement,
                             _div_callback(TGV2D_LENGTH / n))
    h1, l2 = tgv2d_errors(space, res.x, nu, res.t)
    return _finish(cfg, n, space, res.x, res.records,
                   {"nu": nu, "h": space.mesh.h_max, "T": res.t, "dt": settings.step_size(space.mesh.h_max),
                    "model": cfg.model, "scheme": cfg.scheme, "h1_error": h1, "l2_error": l2,
                    "steps": len(res.records)})


# --- 3D Taylor-Green vortex --------------------------------------------------

def tgv3d_space(n, k_prime, refinement=0):
    return build_space(Mesh.uniform(3, n, (0.0, TGV3D_LENGTH)), k_prime, BoundarySpec.uniform(3, FREE_SLIP),
                       refinement)


def tgv3d_initial(space, nu, stab=StabilizationConfig()):
    return stokes_projector(space, (taylor_green_3d, taylor_green_3d_grad), nu=nu, stab=stab)


def run_tgv3d(cfg: CaseConfig, n=None) -> CaseResult:
    n = n or cfg.n_elements
    nu = cfg.viscosity
    stab = _stab(cfg)
    space = tgv3d_space(n, cfg.k_prime, cfg.refinement)
    settings = TimeSettings(cfg.dt, cfg.T, cfg.scheme)
    out = cfg.output_path
    csv_path = out / f"{_stem(cfg, n)}.csv"
    previous = []
    if cfg.restart:
        ck = load_checkpoint(cfg.restart, space)
        x0, up0, t0 = ck["x"], ck["uprime"], ck["t"]
        if csv_path.exists():
            from .diagnostics import read_csv
            previous = [r for r in read_csv(csv_path) if r.t <= t0 + 1e-12]
    else:
        x0, up0, t0 = tgv3d_initial(space, nu, stab), None, 0.0
    solver = TransientSolver(space, FluidParams(nu), stab, cfg.scheme, _nonlinear(cfg))
    h = space.mesh.h_max
    dt = settings.step_size(h)
    done = [len(previous)]

    def cb(rec, x, up):
        check_divergence(rec.div_max, h)
        done[0] += 1
        if cfg.checkpoint and done[0] % CHECKPOINT_EVERY == 0:
            save_checkpoint(cfg.checkpoint, space, x, up, rec.t, done[0], dt)

    res = solver.run(x0, settings, up0, t0, cb, Path(cfg.checkpoint) if cfg.checkpoint else None)
    records = previous + res.records
    summary = tgv3d_properties(records)
    summary.update({"nu": nu, "h": h, "dt": dt, "T": res.t, "model": cfg.model, "scheme": cfg.scheme,
                    "E_k0": res.E_k0, "linear_factorizations": solver.linear.n_factorizations})
    return _finish(cfg, n, space, res.x, records, summary)


def tgv3d_properties(records, early=3.0):
    """Property checks on a 3D Taylor-Green time series."""
    t = np.array([r.t for r in records])
    E = np.array([r.E_k for r in records])
    tot = np.array([r.eps_total for r in records])
    mod = np.array([r.eps_model for r in records])
    if t.size == 0:
        return {}
    peak = float(np.max(tot))
    early_mask = t < early
    return {
        "energy_decreasing": bool(np.all(np.diff(E) < 0)),
        "dissipation_positive": bool(np.all(tot > 0)),
        "eps_total_peak": peak,
        "t_peak": float(t[int(np.argmax(tot))]),
        "early_model_fraction": float(np.max(np.abs(mod[early_mask])) / peak) if early_mask.any() else 0.0,
    }


# --- Oseen manufactured solution ---------------------------------------------

def _oseen_case(cfg: CaseConfig):
    case = OseenCase.regime(cfg.regime)
    if cfg.nu is not None or cfg.Re is not None:
        case = OseenCase(cfg.viscosity, case.a)
    return case


def run_oseen(cfg: CaseConfig, n=None) -> CaseResult:
    n = n or cfg.n_elements
    case = _oseen_case(cfg)
    stab = _stab(cfg)
    space = case.space(n, cfg.k_prime, cfg.refinement)
    x, _ = case.solve(space, stab)
    dmax = div_sup(space, x)
    check_divergence(dmax, space.mesh.h_max)
    e = oseen_errors(case, space, x, stab.C_inv)
    return _finish(cfg, n, space, x, [], {"nu": case.nu, "a": list(case.a), "regime": cfg.regime,
                                         "h": e.h, "error_norm": e.norm, "error_norm_plus": e.norm_plus,
                                         "velocity_part": e.velocity_part, "div_max": dmax})


RUNNERS = {"ldc": run_ldc, "tgv2d": run_tgv2d, "tgv3d": run_tgv3d, "oseen-conv": run_oseen}


def _metadata(cfg: CaseConfig, **extra):
    from . import __version__

    return {"config": asdict(cfg), "version": __version__, **extra}


def run_case(cfg: CaseConfig) -> CaseResult:
    """Run one case; adds the wall time to the run-metadata file."""
    start = time.perf_counter()
    result = RUNNERS[cfg.case](cfg)
    n = cfg.n_elements
    meta = _write_json(cfg.output_path / f"{_stem(cfg, n)}_meta.json",
                       _metadata(cfg, wall_time=time.perf_counter() - start))
    result.files.append(meta)
    return result


# --- convergence studies -----------------------------------------------------

def _write_rates(path, h, err, rate, finest):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "error", "fitted_rate", "finest_pair_rate"])
            for hh, ee in zip(h, err):
                w.writerow([format(v, ".17g") for v in (hh, ee, rate, finest)])
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def pair_rate(h, err):
    """Observed order between the two finest levels."""
    return float(math.log(err[-2] / err[-1]) / math.log(h[-2] / h[-1]))


def run_rates(cfg: CaseConfig) -> CaseResult:
    """Mesh-refinement study over ``cfg.levels``; the error is the case's primary norm."""
    levels = list(cfg.levels or ())
    if len(levels) < 2:
        raise ConfigError("key 'levels' needs at least two meshes for a rate")
    path = cfg.output_path / f"{cfg.case}_{cfg.k_prime}_rates.csv"
    if cfg.case == "oseen-conv":
        study = run_convergence_study(cfg.k_prime, levels, cfg.regime, _stab(cfg), _oseen_case(cfg))
        study.write_csv(path)
        summary = {"case": cfg.case, "k_prime": cfg.k_prime, "regime": cfg.regime, "levels": levels,
                   "rate": study.rate, "rate_plus": study.rate_plus, "velocity_rate": study.velocity_rate}
        return CaseResult(cfg.case, summary, files=[path])
    if cfg.case == "tgv3d":
        raise ConfigError("case 'tgv3d' has no exact solution; use 'run'")
    h, err = [], []
    for n in levels:
        res = RUNNERS[cfg.case](cfg, n)
        h.append(res.summary["h"])
        err.append(res.summary["h1_error"])
        log.info("%s n=%d h1 error %.6e", cfg.case, n, err[-1])
    rate, finest = fitted_rate(h, err), pair_rate(h, err)
    _write_rates(path, h, err, rate, finest)
    summary = {"case": cfg.case, "k_prime": cfg.k_prime, "levels": levels, "h": h, "h1_error": err,
               "rate": rate, "finest_pair_rate": finest}
    return CaseResult(cfg.case, summary, files=[path])
