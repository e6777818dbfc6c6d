import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gasket_plap.energy import EnergyModel
from gasket_plap.errors import DegenerateInputError, ProjectionUnavailable
from gasket_plap.fibering import (FiberingProfile, branch_root, classify_case, fibering_table,
                                  find_roots, natural_scale, peak_location, phi,
                                  phi_double_prime, phi_prime, profile, project_minus,
                                  project_plus, two_root_lambda_limit, write_fibering_csv)
from gasket_plap.functional import NehariTag, ProblemSpec, classify, terms
from gasket_plap.gasket import FractalFunction, build_level
from gasket_plap.validation import grid_root_oracle, random_dirichlet, random_profile

CANON = dict(p=2.0, q=1.5, l=5.0, k=1.0)
CASES = ("I", "II", "III", "IV")


def _prof(A, B, F, G, lam, **kw):
    c = dict(CANON)
    c.update(kw)
    return FiberingProfile(A, B, F, G, c["p"], c["q"], c["l"], c["k"], lam)


def _agree(got, want):
    return len(got) == len(want) and all(
        kg == kw and abs(tg - tw) <= 1e-8 * tw for (tg, kg), (tw, kw) in zip(got, want))


def test_derivative_examples():
    prof = _prof(1, 1, 1, 1, 1.0)
    assert float(phi_prime(1.0, prof)) == 0
    assert abs(float(phi_double_prime(1.0, prof)) + 0.5) < 1e-15


def test_derivatives_against_differences():
    rng = np.random.default_rng(0)
    for case in CASES:
        prof = random_profile(rng, case)
        t = np.geomspace(0.1, 10, 7) * natural_scale(prof)
        h = 1e-6 * t
        d1 = (phi(t + h, prof) - phi(t - h, prof)) / (2 * h)
        d2 = (phi_prime(t + h, prof) - phi_prime(t - h, prof)) / (2 * h)
        assert np.allclose(d1, phi_prime(t, prof), rtol=1e-6, atol=1e-9 * np.abs(d1).max())
        assert np.allclose(d2, phi_double_prime(t, prof), rtol=1e-6,
                           atol=1e-9 * np.abs(d2).max())


def test_nonpositive_t_rejected():
    with pytest.raises(ValueError):
        phi(0.0, _prof(1, 1, 1, 1, 1.0))
    with pytest.raises(ValueError):
        phi_prime(np.array([1.0, -1.0]), _prof(1, 1, 1, 1, 1.0))


def test_profile_validation():
    with pytest.raises(DegenerateInputError):
        _prof(0, 0, 1, 1, 1.0)
    with pytest.raises(ValueError):
        _prof(-1, 1, 1, 1, 1.0)


def test_case_examples():
    assert classify_case(_prof(1, 1, -1, -1, 1)) == "I"
    assert classify_case(_prof(1, 1, 1, -1, 1)) == "II"
    assert classify_case(_prof(1, 1, -1, 1, 1)) == "III"
    assert classify_case(_prof(1, 1, 1, 1, 1)) == "IV"


def test_case_one_has_no_roots():
    assert find_roots(_prof(1, 1, -1, -1, 1.0)).roots == []


def test_two_root_example():
    fr = find_roots(_prof(1, 1, 1, 1, 0.1))
    (t1, k1), (t2, k2) = fr.roots
    assert 0.005 < t1 < 0.02 and 1.4 < t2 < 1.5
    assert (k1, k2) == ("LocalMin", "LocalMax")
    assert fr.regime == "two-roots"
    assert _agree(fr.roots, grid_root_oracle(_prof(1, 1, 1, 1, 0.1)))


def test_case_two_example():
    prof = _prof(1, 1, 1, -1, 1.0)
    fr = find_roots(prof)
    assert [k for _, k in fr.roots] == ["LocalMin"]
    assert _agree(fr.roots, grid_root_oracle(prof))


@pytest.mark.parametrize("case", CASES)
def test_roots_match_grid_oracle(case):
    rng = np.random.default_rng(CASES.index(case))
    expected = {"I": [], "II": ["LocalMin"], "III": ["LocalMax"], "IV": ["LocalMin", "LocalMax"]}
    for _ in range(100):
        prof = random_profile(rng, case)
        fr = find_roots(prof)
        assert [k for _, k in fr.roots] == expected[case]
        assert _agree(fr.roots, grid_root_oracle(prof))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(CASES))
def test_reported_roots_are_critical_points(seed, case):
    prof = random_profile(np.random.default_rng(seed), case)
    for t, kind in find_roots(prof).roots:
        scale = (prof.A * t ** (prof.P - 1) + prof.B * t ** (prof.p - 1)
                 + abs(prof.lam * prof.F) * t ** (prof.q - 1) + abs(prof.G) * t ** (prof.l - 1))
        assert abs(float(phi_prime(t, prof))) <= 1e-10 * scale
        d2 = float(phi_double_prime(t, prof))
        assert kind == ("LocalMin" if d2 > 0 else "LocalMax")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3))
def test_reparametrization_identity(seed, logc):
    rng = np.random.default_rng(seed)
    prof = random_profile(rng, CASES[seed % 4])
    c = math.exp(logc)
    t = np.exp(rng.uniform(-3, 3, 8))
    lhs, rhs = phi(t, prof.scaled(c)), phi(c * t, prof)
    assert np.all(np.abs(lhs - rhs) <= 1e-10 * np.abs(rhs))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-2, 2))
def test_root_scaling_under_reparametrization(seed, logc):
    prof = random_profile(np.random.default_rng(seed), "IV")
    c = math.exp(logc)
    for branch in ("plus", "minus"):
        t = branch_root(prof, branch)
        assert math.isclose(branch_root(prof.scaled(c), branch) * c, t, rel_tol=1e-9)


def test_double_root_regime(caplog):
    prof = _prof(1, 1, 1, 1, 1.0)
    lam_c = two_root_lambda_limit(prof)
    tc = peak_location(prof)
    with caplog.at_level(logging.WARNING):
        fr = find_roots(prof.with_lambda(lam_c))
    assert fr.regime == "double-root"
    assert fr.roots[0][1] == "Inflection" and math.isclose(fr.roots[0][0], tc, rel_tol=1e-12)
    assert "double root" in caplog.text
    assert find_roots(prof.with_lambda(1.01 * lam_c)).regime == "no-roots"
    assert find_roots(prof.with_lambda(0.99 * lam_c)).regime == "two-roots"


def test_projection_unavailable_names_regime():
    prof = _prof(1, 1, 1, 1, 1.0)
    big = prof.with_lambda(2 * two_root_lambda_limit(prof))
    with pytest.raises(ProjectionUnavailable) as exc:
        branch_root(big, "plus")
    assert exc.value.regime == "no-roots" and exc.value.case == "IV"
    with pytest.raises(ProjectionUnavailable):
        branch_root(_prof(1, 1, -1, -1, 1.0), "minus")


def test_lambda_limit_only_in_case_four():
    with pytest.raises(ValueError):
        two_root_lambda_limit(_prof(1, 1, 1, -1, 1.0))


@pytest.fixture(scope="module")
def level3():
    g = build_level(3)
    n = g.n_vertices
    spec = ProblemSpec(1, 1, 1, 2.0, 1.5, 5.0, 0.5, np.ones(n), np.ones(n), 3)
    return spec, g, EnergyModel(2.0, 0.6, 3)


def test_profile_of_unit_norm_function(level3):
    spec, g, em = level3
    u = FractalFunction(3, random_dirichlet(np.random.default_rng(1), g), dirichlet=True)
    u = u.scaled(terms(u, spec, g, em).energy ** -0.5)
    prof = profile(u, spec, g, em)
    assert math.isclose(prof.A, 1.0, rel_tol=1e-12) and math.isclose(prof.B, 1.0, rel_tol=1e-12)
    assert prof.F > 0 and prof.G > 0


def test_profile_homogeneity(level3):
    spec, g, em = level3
    u = FractalFunction(3, random_dirichlet(np.random.default_rng(2), g), dirichlet=True)
    c = 1.7
    a, b = profile(u, spec, g, em).scaled(c), profile(u.scaled(c), spec, g, em)
    for name in "ABFG":
        assert math.isclose(getattr(a, name), getattr(b, name), rel_tol=1e-12)


def test_profile_of_zero_rejected(level3):
    spec, g, em = level3
    with pytest.raises(DegenerateInputError):
        profile(FractalFunction.zeros(g), spec, g, em)


def test_projections(level3):
    spec, g, em = level3
    rng = np.random.default_rng(3)
    for _ in range(20):
        u = FractalFunction(3, random_dirichlet(rng, g), dirichlet=True)
        up, um = project_plus(u, spec, g, em), project_minus(u, spec, g, em)
        assert classify(up, spec, g, em).tag is NehariTag.PLUS
        assert classify(um, spec, g, em).tag is NehariTag.MINUS
        ts = find_roots(profile(u, spec, g, em)).ts
        assert math.isclose(up.values[3] / u.values[3], ts[0], rel_tol=1e-12)
        # idempotence and scale invariance
        assert np.allclose(project_plus(up, spec, g, em).values, up.values, rtol=1e-9, atol=0)
        assert np.allclose(project_plus(u.scaled(3.3), spec, g, em).values, up.values,
                           rtol=1e-9, atol=0)


def test_table_and_csv(tmp_path):
    prof = _prof(1, 1, 1, 1, 0.1)
    t = np.geomspace(1e-3, 10, 50)
    tab = fibering_table(prof, t)
    assert tab.shape == (50, 4)
    assert np.array_equal(tab[:, 1], phi(t, prof))
    path = tmp_path / "fib.csv"
    write_fibering_csv(tab, path)
    rows = path.read_text().splitlines()
    assert rows[0] == "t,phi,dphi,ddphi" and len(rows) == 51
    back = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    assert np.array_equal(back, tab)
