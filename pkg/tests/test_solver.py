import math

import numpy as np
import pytest

from gasket_plap.energy import energy_value, extend_values
from gasket_plap.errors import InfeasibleError, PreconditionError
from gasket_plap.fibering import FiberingProfile, phi_prime
from gasket_plap.functional import (NehariTag, ProblemSpec, classify, coefficient_norms,
                                    nehari_minus_radii, terms)
from gasket_plap.gasket import FractalFunction, build_level
from gasket_plap.solver import (SolveOptions, minimize_on_minus, minimize_on_plus,
                                perturbation_continuity_check, problem_thresholds,
                                residual_scale, solve_branch, solve_pair, two_solutions,
                                weak_residual)
from gasket_plap.validation import EPS_LADDER, smooth_random_dirichlet


def _scaled_residual(u, spec, g, em):
    return weak_residual(u, spec, g, em)[1] / residual_scale(u, g, em)


def test_options_validation():
    for bad in (dict(restarts=0), dict(max_iters=0), dict(step0=0.0), dict(grad_tol=-1.0)):
        with pytest.raises(ValueError):
            SolveOptions(**bad)


def test_plus_minimizer_level4(problem4):
    spec, g, em, th, emb = problem4
    u, I = minimize_on_plus(spec, g, em, SolveOptions(), th, emb)
    assert classify(u, spec, g, em).tag is NehariTag.PLUS
    assert I < 0
    prof = FiberingProfile.from_terms(terms(u, spec, g, em), spec)
    assert abs(float(phi_prime(1.0, prof))) <= 1e-9 * (prof.A + prof.B)
    assert _scaled_residual(u, spec, g, em) <= 1e-6


def test_minus_minimizer_level4(problem4):
    spec, g, em, th, emb = problem4
    v, I = minimize_on_minus(spec, g, em, SolveOptions(), th, emb)
    cl = classify(v, spec, g, em)
    assert cl.tag is NehariTag.MINUS and cl.phi2 < 0
    assert I >= th.delta1 - 1e-8
    _, g_norm = coefficient_norms(spec, g)
    norm = terms(v, spec, g, em).energy ** (1 / spec.p)
    assert norm >= max(nehari_minus_radii(spec, th.K_used, g_norm))
    assert _scaled_residual(v, spec, g, em) <= 1e-6


def test_reported_value_is_best_restart(problem4):
    spec, g, em, th, emb = problem4
    for branch in ("plus", "minus"):
        res = solve_branch(spec, g, em, branch, SolveOptions(restarts=4), emb.extremal)
        assert res.I == min(res.restart_values)
        assert res.restarts_used == 5


def test_restart_stability_across_seeds(problem4):
    spec, g, em, th, emb = problem4
    vals, flagged = [], False
    for seed in range(5):
        res = solve_branch(spec, g, em, "plus", SolveOptions(restarts=2, seed=seed), emb.extremal)
        vals.append(res.I)
        flagged |= res.multimodal
    spread = (max(vals) - min(vals)) / abs(min(vals))
    assert spread <= 1e-6 or flagged


def test_warm_start_consistency(problem4):
    """Extend the level-4 solution, re-solve at level 5: the change in I_plus
    stays below the change in the solution's renormalized energy."""
    spec4, g4, em4, th4, emb4 = problem4
    r4 = solve_branch(spec4, g4, em4, "plus", SolveOptions(), emb4.extremal)
    g5, em5 = build_level(5), em4.at_level(5)
    n = g5.n_vertices
    spec5 = ProblemSpec(spec4.a, spec4.b, spec4.k, spec4.p, spec4.q, spec4.l, spec4.lam,
                        np.ones(n), np.ones(n), 5)
    ext = FractalFunction(5, extend_values(r4.u.values, g4, spec4.p), dirichlet=True)
    r5 = solve_branch(spec5, g5, em5, "plus", SolveOptions(), ext)
    increment = abs(energy_value(r5.u.values, g5, em5) - energy_value(r4.u.values, g4, em4))
    assert abs(r5.I - r4.I) < increment
    chained = solve_branch(spec5, g5, em5, "plus", SolveOptions(warm_start_levels=True),
                           emb4.extremal)
    assert chained.I <= r5.I + 1e-6 * abs(r5.I)


def test_canonical_two_solutions(problem5, report5):
    spec, g, em, th, emb = problem5
    rep = report5
    assert rep.complete
    assert rep.class_plus.tag is NehariTag.PLUS and rep.class_minus.tag is NehariTag.MINUS
    assert rep.I_plus < 0 < th.delta1 <= rep.I_minus + 1e-8
    assert rep.residual_inf_plus <= 1e-6 * rep.residual_scale_plus
    assert rep.residual_inf_minus <= 1e-6 * rep.residual_scale_minus
    for u in (rep.u_plus, rep.u_minus):
        tr = terms(u, spec, g, em)
        assert abs(classify(u, spec, g, em).residual) <= 1e-9 * (tr.A + tr.B)


def test_two_solutions_guard(problem5):
    spec, g, em, th, emb = problem5
    with pytest.raises(PreconditionError, match="lambda_hat1"):
        two_solutions(spec.with_lambda(th.lambda_hat1), g, em, SolveOptions(), emb)


def test_branch_guards(problem4):
    spec, g, em, th, emb = problem4
    with pytest.raises(PreconditionError, match="lambda1"):
        minimize_on_plus(spec.with_lambda(1.01 * th.lambda1), g, em)
    with pytest.raises(PreconditionError, match="lambda_hat1"):
        minimize_on_minus(spec.with_lambda(1.01 * th.lambda_hat1), g, em)


def test_infeasible_branches(problem4):
    spec, g, em, th, emb = problem4
    n = g.n_vertices
    no_f = ProblemSpec(1, 1, 1, 2, 1.5, 5, spec.lam, -np.ones(n), np.ones(n), 4)
    with pytest.raises(InfeasibleError, match="f is nowhere positive"):
        solve_branch(no_f, g, em, "plus")
    no_g = ProblemSpec(1, 1, 1, 2, 1.5, 5, spec.lam, np.ones(n), -np.ones(n), 4)
    with pytest.raises(InfeasibleError, match="g is nowhere positive"):
        solve_branch(no_g, g, em, "minus")
    with pytest.raises(ValueError):
        solve_branch(spec, g, em, "zero")


def test_solve_pair_records_failures_above_threshold(problem4):
    spec, g, em, th, emb = problem4
    # beyond both validity conditions of the M- energy bound
    big = spec.with_lambda(2 * max(th.lambda2, th.lambda3))
    th_big, _ = problem_thresholds(big, g, em, emb)
    assert math.isnan(th_big.delta1)
    rep = solve_pair(big, g, em, SolveOptions(restarts=2), th_big, emb)
    assert "minus_bound" in rep.failures or "minus" in rep.failures
    assert not rep.complete


def test_weak_residual_of_zero(problem4):
    spec, g, em, th, emb = problem4
    r, inf = weak_residual(FractalFunction.zeros(g), spec, g, em)
    assert inf == 0 and not np.any(r)


def test_weak_residual_continuity(report4, problem4):
    spec, g, em, th, emb = problem4
    u = report4.u_plus
    rng = np.random.default_rng(0)
    base, _ = weak_residual(u, spec, g, em)
    d = smooth_random_dirichlet(rng, g)
    d *= np.max(np.abs(u.values)) / np.max(np.abs(d))
    pert, _ = weak_residual(u.with_values(u.values + 1e-8 * d), spec, g, em)
    change = np.max(np.abs(pert - base)) / residual_scale(u, g, em)
    assert change <= 1e-6


def test_continuity_at_zero_and_symmetry(report4, problem4):
    spec, g, em, th, emb = problem4
    u0 = report4.u_plus
    w = FractalFunction(4, smooth_random_dirichlet(np.random.default_rng(1), g), dirichlet=True)
    tab = perturbation_continuity_check(u0, w, [0.0], spec, g, em)
    assert abs(tab.rows[0][1] - 1.0) <= 1e-9
    ladder = [s * e for e in EPS_LADDER[2:] for s in (1, -1)]
    tab = perturbation_continuity_check(u0, w, ladder, spec, g, em)
    assert tab.branch == "plus"
    for e, t in tab.rows:
        assert abs(t - 1.0) <= tab.slope * abs(e) * (1 + 1e-12)
    assert max(abs(t - 1) for e, t in tab.rows if abs(e) == 1e-6) < 1e-5


def test_continuity_table_first_order(report4, problem4):
    spec, g, em, th, emb = problem4
    u0 = report4.u_minus
    w = FractalFunction(4, smooth_random_dirichlet(np.random.default_rng(2), g), dirichlet=True)
    tab = perturbation_continuity_check(u0, w, EPS_LADDER, spec, g, em)
    assert tab.branch == "minus"
    ratios = [r for _, r in tab.ratios()]
    assert len(ratios) >= 4
    assert tab.first_order_spread() <= 1e-2


def test_continuity_needs_member(problem4):
    spec, g, em, th, emb = problem4
    w = FractalFunction(4, smooth_random_dirichlet(np.random.default_rng(3), g), dirichlet=True)
    with pytest.raises(PreconditionError):
        perturbation_continuity_check(w, w, EPS_LADDER, spec, g, em)


def test_deterministic_for_fixed_seed(problem4):
    spec, g, em, th, emb = problem4
    a = solve_branch(spec, g, em, "minus", SolveOptions(restarts=2, seed=5), emb.extremal)
    b = solve_branch(spec, g, em, "minus", SolveOptions(restarts=2, seed=5), emb.extremal)
    assert a.I == b.I and np.array_equal(a.u.values, b.u.values)
    assert not math.isnan(a.I)
