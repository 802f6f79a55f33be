import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmsflow.errors import ConfigError
from vmsflow.oseen import (ADVECTIVE, DIFFUSIVE, ConvergenceStudy, OseenCase, OseenErrors, fitted_rate,
                           oseen_errors, run_convergence_study, triple_norm, triple_norm_terms)


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(0.5, 4.0), c=st.floats(1e-3, 1e3))
def test_fitted_rate_recovers_power_law(rate, c):
    h = np.array([1 / 8, 1 / 16, 1 / 32])
    assert fitted_rate(h, c * h ** rate) == pytest.approx(rate, rel=1e-10)


def test_fitted_rate_needs_two_levels():
    with pytest.raises(ConfigError):
        fitted_rate([0.1], [1.0])


def test_triple_norm_of_linear_field():
    # grad v = [[0, 1], [0, 0]]: 2 nu |sym|^2 = nu, (a.grad) v = (a_1, 0)
    w = np.full(4, 0.25)
    g = np.broadcast_to(np.array([[0.0, 1.0], [0.0, 0.0]]), (4, 2, 2))
    a = np.broadcast_to(np.array([0.0, 2.0]), (4, 2))
    tau = np.full(4, 0.5)
    visc, stream, second, l2 = triple_norm_terms(w, None, g, None, np.zeros((4, 2)), a, 0.1, tau)
    assert (visc, stream, second, l2) == pytest.approx((0.1, 2.0, 0.0, 0.0))
    assert triple_norm(w, g, np.zeros((4, 2)), a, 0.1, tau) == pytest.approx(math.sqrt(2.1))


def test_regimes():
    adv, dif = OseenCase.regime(ADVECTIVE), OseenCase.regime(DIFFUSIVE)
    assert math.hypot(*adv.a) == pytest.approx(1.0) and adv.nu == 1e-6
    assert dif.nu == 1.0
    with pytest.raises(ConfigError):
        OseenCase.regime("turbulent")


@pytest.mark.parametrize("levels", [(8, 16), (8, 16, 48), (16, 8, 4)])
def test_study_rejects_bad_levels(levels):
    with pytest.raises(ConfigError):
        run_convergence_study(1, levels)


@pytest.mark.parametrize("regime", [ADVECTIVE, DIFFUSIVE])
def test_errors_shrink_under_refinement(regime):
    study = run_convergence_study(1, (4, 8, 16), regime)
    norms = [e.norm for e in study.errors]
    assert norms[0] > norms[1] > norms[2]
    assert all(e.norm_plus >= e.norm >= e.velocity_part for e in study.errors)
    assert study.rate > 0.8


def test_error_report_fields():
    case = OseenCase.regime(DIFFUSIVE)
    space = case.space(4, 2)
    x, _ = case.solve(space)
    e = oseen_errors(case, space, x)
    assert e.h == pytest.approx(0.25) and e.norm > 0


def test_study_csv(tmp_path):
    s = ConvergenceStudy(1, ADVECTIVE, [8, 16], [OseenErrors(0.125, 1.0, 2.0, 0.5), OseenErrors(0.0625, 0.25, 0.5, 0.25)])
    assert s.rate == pytest.approx(2.0) and s.velocity_rate == pytest.approx(1.0)
    lines = s.write_csv(tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "h,error_norm,error_norm_plus,fitted_rate,velocity_part,velocity_rate"
    assert len(lines) == 3
