import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gasket_plap.energy import (EnergyModel, a_p, cached_rp, crude_energy, embedding_extremal,
                                energy_form, energy_gradient, energy_hessian_values,
                                energy_value, estimate_rp, extend_pharmonic, extend_values,
                                minimal_boundary_energies, renormalized_energy)
from gasket_plap.errors import ConvergenceError, DimensionError
from gasket_plap.gasket import FractalFunction, build_level
from gasket_plap.validation import (gradient_fd_error, harmonic_extension_oracle,
                                    random_dirichlet, smooth_samples)

# sharp discrete embedding constants at p = 2, level 1..5; K_1 = 3/sqrt(50)
# exactly, the rest frozen from the per-vertex constrained minimizations
K_FROZEN = [0.42426406871, 0.42988, 0.43411, 0.43899, 0.44147]


def _model(p, m):
    return EnergyModel.estimate(p, m)


def _grad(v, g, em):
    return energy_gradient(FractalFunction(g.level, v), g, em)


def test_cell_density_examples():
    assert a_p(3.2, 3.2, 3.2, 2.5) == 0
    assert a_p(0, 0, 1, 2) == 2
    assert a_p(1, 2, 3, 3) == 10


def test_crude_energy_examples():
    g0 = build_level(0)
    assert crude_energy(FractalFunction(0, [0.0, 0.0, 1.0]), g0, 2.0) == 2.0
    g1 = build_level(1)
    u = FractalFunction(1, [1.0, 0.0, 0.0, 0.4, 0.4, 0.2])
    assert abs(crude_energy(u, g1, 2.0) - 1.2) < 1e-14
    for m in range(4):
        g = build_level(m)
        assert crude_energy(FractalFunction(m, np.full(g.n_vertices, 7.0)), g, 3.0) == 0


def test_renormalized_examples():
    g0 = build_level(0)
    u0 = FractalFunction(0, [1.0, 0.0, 0.0])
    r0 = renormalized_energy(u0, g0, EnergyModel(2.0, 0.6, 0))
    assert r0.renormalized == r0.crude == 2.0
    u1 = extend_pharmonic(u0, 2.0, 0.6)
    r1 = renormalized_energy(u1, build_level(1), EnergyModel(2.0, 0.6, 1))
    assert abs(r1.renormalized - 2.0) < 1e-12
    assert abs(r1.norm - math.sqrt(2.0)) < 1e-12


def test_level_mismatch():
    with pytest.raises(DimensionError):
        renormalized_energy(FractalFunction(1, np.zeros(6)), build_level(1),
                            EnergyModel(2.0, 0.6, 2))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.sampled_from([1.5, 2.0, 3.0]),
       st.integers(0, 2 ** 31))
def test_homogeneity_and_constant_invariance(c, p, seed):
    g = build_level(3)
    em = EnergyModel(p, 0.5, 3)
    v = random_dirichlet(np.random.default_rng(seed), g)
    e = energy_value(v, g, em)
    assert abs(energy_value(c * v, g, em) - abs(c) ** p * e) <= 1e-12 * abs(c) ** p * e
    assert abs(energy_value(v + c, g, em) - e) <= 1e-12 * e


def test_harmonic_extension_rule():
    u = extend_pharmonic(FractalFunction(0, [1.0, 0.0, 0.0]), 2.0, 0.6)
    assert np.allclose(u.values[3:], harmonic_extension_oracle(1.0, 0.0, 0.0), atol=1e-12)
    assert np.allclose(u.values[3:], [0.4, 0.4, 0.2], atol=1e-12)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_constant_extension(p):
    u = extend_pharmonic(FractalFunction(1, np.full(6, -2.5)), p)
    assert np.all(u.values == -2.5)


@pytest.mark.parametrize("m", range(5))
def test_extension_preserves_energy_at_p2(m):
    rng = np.random.default_rng(m)
    g = build_level(m)
    v = rng.standard_normal(g.n_vertices)
    e0 = energy_value(v, g, EnergyModel(2.0, 0.6, m))
    e1 = energy_value(extend_values(v, g, 2.0), build_level(m + 1), EnergyModel(2.0, 0.6, m + 1))
    assert abs(e1 - e0) <= 1e-10 * e0


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_extension_is_minimal(p):
    """Away from p = 2 the cell density is not self-similar; the extension is
    still the least-energy completion, checked against random perturbations."""
    rng = np.random.default_rng(1)
    g = build_level(2)
    v = rng.standard_normal(g.n_vertices)
    ext = extend_values(v, g, p)
    g3 = build_level(3)
    e = energy_value(ext, g3, EnergyModel(p, 0.5, 3))
    for _ in range(50):
        trial = ext.copy()
        trial[g.n_vertices:] += 1e-3 * rng.standard_normal(g3.n_vertices - g.n_vertices)
        assert energy_value(trial, g3, EnergyModel(p, 0.5, 3)) >= e


def test_rp_at_two():
    assert abs(estimate_rp(2.0, 1e-9) - 0.6) <= 1e-9


def test_rp_level_one_oracle():
    # level-1 minimum with corners (0, 0, 1): midpoints (1/5, 2/5, 2/5)
    rho = dict(minimal_boundary_energies(2.0, 1))
    assert abs(rho[1] / rho[0] - 0.6) < 1e-14


@pytest.mark.parametrize("p", [1.5, 3.0, 4.0])
def test_rp_in_unit_interval_and_self_consistent(p):
    r, levels = estimate_rp(p, 1e-6, return_levels=True)
    assert 0 < r < 1
    rho = [e for _, e in minimal_boundary_energies(p, levels)]
    assert abs(rho[-1] / rho[-2] - rho[-2] / rho[-3]) < 1e-6


def test_rp_unreachable_tolerance():
    with pytest.raises(ConvergenceError):
        estimate_rp(3.0, 1e-14, max_level=4)


def test_rp_cache(tmp_path):
    path = tmp_path / "c.json"
    r = cached_rp(2.0, 1e-9, path)
    data = json.loads(path.read_text())
    assert abs(data[format(2.0, ".17g")]["r_p"] - r) == 0
    data[format(2.0, ".17g")]["r_p"] = 0.123
    path.write_text(json.dumps(data))
    assert cached_rp(2.0, 1e-9, path) == 0.123
    # a looser cached entry does not satisfy a tighter request
    assert abs(cached_rp(2.0, 1e-12, path) - 0.6) < 1e-12


def test_gradient_of_constant_is_zero():
    g = build_level(3)
    u = FractalFunction(3, np.full(g.n_vertices, 1.7))
    assert np.all(energy_gradient(u, g, EnergyModel(2.5, 0.4, 3)) == 0)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_gradient_matches_central_differences(p):
    rng = np.random.default_rng(3)
    g = build_level(3)
    em = _model(p, 3)
    for _ in range(10):
        assert gradient_fd_error(random_dirichlet(rng, g), g, em) <= 1e-6


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_gradient_homogeneity(p):
    rng = np.random.default_rng(4)
    g = build_level(3)
    em = EnergyModel(p, 0.5, 3)
    u = FractalFunction(3, random_dirichlet(rng, g), dirichlet=True)
    c = 2.7
    lhs = energy_gradient(u.scaled(c), g, em)
    rhs = c * abs(c) ** (p - 2) * energy_gradient(u, g, em)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=0)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_hessian_against_gradient_differences(p):
    rng = np.random.default_rng(5)
    g = build_level(2)
    em = EnergyModel(p, 0.5, 2)
    v = random_dirichlet(rng, g)
    d = rng.standard_normal(g.n_vertices)
    h = 1e-6
    fd = (_grad(v + h * d, g, em) - _grad(v - h * d, g, em)) / (2 * h)
    hv = energy_hessian_values(v, g, em) @ d
    assert np.linalg.norm(hv - fd) <= 1e-5 * np.linalg.norm(hv)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_energy_form_properties(p):
    rng = np.random.default_rng(6)
    g = build_level(3)
    em = EnergyModel(p, 0.5, 3)
    u = FractalFunction(3, random_dirichlet(rng, g), dirichlet=True)
    v = FractalFunction(3, random_dirichlet(rng, g), dirichlet=True)
    e = renormalized_energy(u, g, em).renormalized
    assert abs(energy_form(u, u, g, em) - e) <= 1e-10 * e
    assert abs(energy_form(u, v.scaled(-3.5), g, em) + 3.5 * energy_form(u, v, g, em)) \
        <= 1e-12 * e
    assert abs(energy_form(u, FractalFunction(3, np.ones(g.n_vertices)), g, em)) <= 1e-12 * e


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("fn", smooth_samples())
def test_energy_monotone_in_level(p, fn):
    em = _model(p, 1)
    es = []
    for m in range(1, 7):
        g = build_level(m)
        es.append(energy_value(FractalFunction.from_callable(g, fn).values, g, em.at_level(m)))
    assert all(b >= a for a, b in zip(es, es[1:]))


def test_embedding_constant_level_one():
    emb = embedding_extremal(build_level(1), EnergyModel(2.0, 0.6, 1))
    assert abs(emb.K - 3 / math.sqrt(50)) <= 1e-8


def test_embedding_constants_frozen_and_nondecreasing():
    ks = [embedding_extremal(build_level(m), EnergyModel(2.0, 0.6, m)).K for m in range(1, 6)]
    assert np.allclose(ks, K_FROZEN, rtol=0, atol=1e-5)
    assert all(b >= a for a, b in zip(ks, ks[1:]))


def test_embedding_sharpness():
    g = build_level(3)
    em = EnergyModel(2.0, 0.6, 3)
    emb = embedding_extremal(g, em)
    u = emb.extremal
    ratio = np.max(np.abs(u.values)) / renormalized_energy(u, g, em).norm
    assert abs(ratio - emb.K) <= 1e-8
    # no other interior vertex does better
    assert np.nanmax(emb.per_vertex) == emb.K


def test_embedding_bound_holds_on_random_functions():
    g = build_level(3)
    em = EnergyModel(2.0, 0.6, 3)
    K = embedding_extremal(g, em).K
    rng = np.random.default_rng(8)
    for _ in range(100):
        u = FractalFunction(3, random_dirichlet(rng, g), dirichlet=True)
        assert np.max(np.abs(u.values)) <= K * renormalized_energy(u, g, em).norm * (1 + 1e-12)


def test_energy_model_validation():
    with pytest.raises(ValueError):
        EnergyModel(1.0, 0.5, 1)
    with pytest.raises(ValueError):
        EnergyModel(2.0, 1.0, 1)
    with pytest.raises(ValueError):
        EnergyModel(2.0, 0.5, -1)
