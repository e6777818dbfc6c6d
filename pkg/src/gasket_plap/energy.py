"""Discrete p-energy on gasket levels.

The cell density is ``A_p(x1, x2, x3) = |x1-x2|^p + |x2-x3|^p + |x3-x1|^p``.
Since every edge of a gasket graph belongs to exactly one cell, the crude
level-m energy is simply ``sum over edges |u_i - u_j|^p`` and its gradient is
an edge scatter.  Renormalized energy divides by ``r_p ** m``.

For ``p > 1`` the discrete energy is C^1, so the one-sided derivatives that
define the energy form coincide at every finite level and the form is the
single number ``grad E(u) . v / p``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, DimensionError
from .gasket import FractalFunction, GasketLevel, build_level, check_level

log = logging.getLogger(__name__)

# Huber-style floor on |d| inside Newton Hessians (objective stays unsmoothed)
HESS_FLOOR = 1e-14
NEWTON_GTOL = 1e-12
# energy differences below this relative size are roundoff, not ascent
_ROUNDOFF = 16 * np.finfo(float).eps
_STEP_FLOOR = 64 * np.finfo(float).eps
RP_MAX_LEVEL = 12


def a_p(x1, x2, x3, p):
    """Cell energy density: sum of pairwise ``|differences|^p``."""
    return abs(x1 - x2) ** p + abs(x2 - x3) ** p + abs(x3 - x1) ** p


@dataclass(frozen=True)
class EnergyModel:
    """Exponent, renormalization factor and working level."""

    p: float
    r_p: float
    level: int
    rp_tolerance: float = 0.0

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if not 0 < self.r_p < 1:
            raise ValueError(f"r_p must lie in (0, 1), got {self.r_p}")
        if self.level < 0:
            raise ValueError(f"level must be nonnegative, got {self.level}")

    @property
    def factor(self) -> float:
        """``r_p ** -level``, the renormalization multiplier."""
        return self.r_p ** (-self.level)

    @classmethod
    def estimate(cls, p: float, level: int, tol: float | None = None, cache=True) -> "EnergyModel":
        tol = default_rp_tolerance(p) if tol is None else tol
        r = cached_rp(p, tol) if cache else estimate_rp(p, tol)
        return cls(p, r, level, tol)

    def at_level(self, level: int) -> "EnergyModel":
        return EnergyModel(self.p, self.r_p, level, self.rp_tolerance)


@dataclass(frozen=True)
class EnergyReport:
    crude: float
    renormalized: float
    norm: float


def _edge_energy(values: np.ndarray, edges: np.ndarray, p: float) -> float:
    d = values[edges[:, 0]] - values[edges[:, 1]]
    return float(np.sum(np.abs(d) ** p))


def _snap(d: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Zero out differences that are pure roundoff of the stored values.

    For p < 2 the slope ``|d|^(p-1)`` of an edge at roundoff-level ``d`` is
    ~1e-8, which would otherwise put a floor under every gradient test.
    """
    scale = np.max(np.abs(values), axis=-1, keepdims=True) if values.ndim > 1 else np.max(np.abs(values))
    return np.where(np.abs(d) <= 64 * np.finfo(float).eps * scale, 0.0, d)


def _edge_gradient(values: np.ndarray, edges: np.ndarray, p: float, snap: bool = False) -> np.ndarray:
    i, j = edges[:, 0], edges[:, 1]
    d = values[i] - values[j]
    if snap:
        d = _snap(d, values)
    ge = p * np.abs(d) ** (p - 1) * np.sign(d)
    n = values.shape[0]
    return np.bincount(i, ge, minlength=n) - np.bincount(j, ge, minlength=n)


def _hess_weight(ad: np.ndarray, p: float) -> np.ndarray:
    """Per-edge curvature used by the Newton solves.

    True second derivative ``p(p-1)|d|^(p-2)`` on edges with sizeable
    differences; the secant value ``p|d|^(p-2)`` on nearly flat edges, where
    Newton on ``|d|^p`` would overshoot (p < 2) or crawl (p > 2).  The secant
    step sends a flat edge straight to zero difference.
    """
    ad = np.maximum(ad, HESS_FLOOR)
    tau = 1e-3 * ad.max(axis=-1, keepdims=True)
    w = ad ** (p - 2)
    return np.where(ad > tau, p * (p - 1) * w, p * w)


def crude_energy(u: FractalFunction, g: GasketLevel, p: float) -> float:
    """Level-m crude energy: ``A_p`` summed over all cells."""
    check_level(u, g)
    return _edge_energy(u.values, g.edges, p)


def _check_model(g: GasketLevel, em: EnergyModel) -> None:
    if em.level != g.level:
        raise DimensionError(f"energy model is at level {em.level}, graph at level {g.level}")


def renormalized_energy(u: FractalFunction, g: GasketLevel, em: EnergyModel) -> EnergyReport:
    check_level(u, g)
    _check_model(g, em)
    crude = _edge_energy(u.values, g.edges, em.p)
    ren = crude * em.factor
    return EnergyReport(crude, ren, ren ** (1.0 / em.p))


def energy_value(values: np.ndarray, g: GasketLevel, em: EnergyModel) -> float:
    """Renormalized energy of a raw vertex array (no level checks)."""
    return _edge_energy(values, g.edges, em.p) * em.factor


def energy_gradient(u: FractalFunction, g: GasketLevel, em: EnergyModel) -> np.ndarray:
    """Gradient of the renormalized energy with respect to all vertex values.

    Boundary entries are included; Dirichlet callers ignore them.
    """
    check_level(u, g)
    _check_model(g, em)
    return _edge_gradient(u.values, g.edges, em.p) * em.factor


def energy_gradient_values(values: np.ndarray, g: GasketLevel, em: EnergyModel) -> np.ndarray:
    return _edge_gradient(values, g.edges, em.p) * em.factor


def energy_hessian_values(values: np.ndarray, g: GasketLevel, em: EnergyModel) -> sp.csr_matrix:
    """Sparse Hessian of the renormalized energy at ``values``.

    Exact ``p(p-1)|d|^(p-2)`` edge curvature, with ``|d|`` floored at
    ``HESS_FLOOR`` so that p < 2 stays finite on flat edges.
    """
    i, j = g.edges[:, 0], g.edges[:, 1]
    ad = np.maximum(np.abs(values[i] - values[j]), HESS_FLOOR)
    w = em.p * (em.p - 1) * ad ** (em.p - 2) * em.factor
    n = values.shape[0]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([w, w, -w, -w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def energy_form(u: FractalFunction, v: FractalFunction, g: GasketLevel, em: EnergyModel) -> float:
    """``E_p(u, v) = (1/p) d/dt E_p(u + t v)`` at ``t = 0``; linear in ``v``."""
    check_level(v, g)
    return float(energy_gradient(u, g, em) @ v.values) / em.p


def energy_norm(u: FractalFunction, g: GasketLevel, em: EnergyModel) -> float:
    return renormalized_energy(u, g, em).norm


# ---------------------------------------------------------------------------
# cell-local p-harmonic extension

# local vertex slots: x1, x2, x3 (given) then y12, y13, y23 (new midpoints)
_LOCAL_EDGES = np.array(
    [(0, 3), (3, 4), (4, 0), (3, 1), (1, 5), (5, 3), (4, 5), (5, 2), (2, 4)]
)


def _local_terms(z: np.ndarray, p: float, hessian: bool):
    """Objective, gradient and Hessian (free block) for batched cells.

    ``z`` has shape (n, 6).  Returns f (n,), g (n, 3), H (n, 3, 3) or None.
    """
    i, j = _LOCAL_EDGES[:, 0], _LOCAL_EDGES[:, 1]
    d = z[:, i] - z[:, j]
    ad = np.abs(d)
    f = np.sum(ad ** p, axis=1)
    ds = _snap(d, z)
    ge = p * np.abs(ds) ** (p - 1) * np.sign(ds)
    grad = np.zeros_like(z)
    for e, (a, b) in enumerate(_LOCAL_EDGES):
        grad[:, a] += ge[:, e]
        grad[:, b] -= ge[:, e]
    if not hessian:
        return f, grad[:, 3:], None
    h = _hess_weight(ad, p)
    H = np.zeros((z.shape[0], 6, 6))
    for e, (a, b) in enumerate(_LOCAL_EDGES):
        H[:, a, a] += h[:, e]
        H[:, b, b] += h[:, e]
        H[:, a, b] -= h[:, e]
        H[:, b, a] -= h[:, e]
    Hf = H[:, 3:, 3:]
    diag = np.max(np.abs(np.diagonal(Hf, axis1=1, axis2=2)), axis=1)
    Hf = Hf + (1e-12 * (1.0 + diag))[:, None, None] * np.eye(3)
    return f, grad[:, 3:], Hf


def _solve_cells(x: np.ndarray, p: float, max_iter: int = 100) -> np.ndarray:
    """Minimize the 3-subcell energy for each row of ``x`` (values in [0, 1])."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    # the p = 2 "1/5-2/5" rule as the starting point
    y = np.stack(
        [(2 * x1 + 2 * x2 + x3) / 5, (2 * x1 + x2 + 2 * x3) / 5, (x1 + 2 * x2 + 2 * x3) / 5],
        axis=1,
    )
    settled = np.zeros(x.shape[0], dtype=bool)
    gnorm = np.inf
    for _ in range(max_iter):
        active = np.flatnonzero(~settled)
        z = np.concatenate([x[active], y[active]], axis=1)
        f, gr, H = _local_terms(z, p, hessian=True)
        gn = np.max(np.abs(gr), axis=1)
        step = -np.linalg.solve(H, gr[..., None])[..., 0]
        # stop on a small gradient, or once the Newton step or decrement is
        # roundoff (for p < 2 the gradient is not Lipschitz near flat edges)
        decrement = -np.sum(step * gr, axis=1)
        done = (
            (gn <= NEWTON_GTOL)
            | (np.max(np.abs(step), axis=1) <= _STEP_FLOOR)
            | (np.abs(decrement) <= _ROUNDOFF * f)
        )
        gnorm = float(gn[~done].max()) if np.any(~done) else 0.0
        settled[active[done]] = True
        if np.all(settled):
            return y
        keep = ~done
        active, f, gr, step = active[keep], f[keep], gr[keep], step[keep]
        slope = np.sum(step * gr, axis=1)
        bad = ~(slope < 0)
        # not a descent direction: fall back to steepest descent
        step[bad] = -gr[bad]
        slope[bad] = -np.sum(gr[bad] ** 2, axis=1)
        t = np.ones(active.shape[0])
        accepted = np.zeros(active.shape[0], dtype=bool)
        ynew = y[active].copy()
        for _ls in range(60):
            trial = y[active] + t[:, None] * step
            ft, _, _ = _local_terms(np.concatenate([x[active], trial], axis=1), p, hessian=False)
            ok = (ft <= f + 1e-4 * t * slope + _ROUNDOFF * np.abs(f)) & ~accepted
            ynew[ok] = trial[ok]
            accepted |= ok
            if np.all(accepted):
                break
            t = np.where(accepted, t, 0.5 * t)
        y[active] = ynew
    raise ConvergenceError(
        f"cell-local extension did not converge in {max_iter} Newton steps "
        f"(gradient norm {gnorm:.3e})",
        achieved=gnorm,
    )


def extend_values(values: np.ndarray, g: GasketLevel, p: float) -> np.ndarray:
    """Minimal-energy extension of level-m vertex values to level m+1."""
    x = values[g.cells]
    lo = x.min(axis=1)
    span = x.max(axis=1) - lo
    flat = span == 0
    safe = np.where(flat, 1.0, span)
    xs = (x - lo[:, None]) / safe[:, None]
    y = np.empty_like(xs)
    if np.any(~flat):
        y[~flat] = _solve_cells(xs[~flat], p)
    y[flat] = 0.0
    y = lo[:, None] + safe[:, None] * y
    y[flat] = x[flat, :1]
    return np.concatenate([values, y.reshape(-1)])


def extend_pharmonic(u: FractalFunction, p: float, r_p: float | None = None) -> FractalFunction:
    """p-harmonic extension of ``u`` from level m to level m+1.

    The new values are found cell by cell: each level-m cell owns its three
    edge midpoints, so the level-(m+1) crude energy splits into independent
    strictly convex 3-unknown problems.  ``r_p`` does not enter the
    minimizer; it is accepted so callers can pass a full energy model.
    """
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    g = build_level(u.level)
    return FractalFunction(u.level + 1, extend_values(u.values, g, p), u.dirichlet)


# ---------------------------------------------------------------------------
# global constrained minimization of the crude energy


def _laplacian(g: GasketLevel, weights: np.ndarray, free_map: np.ndarray, n_free: int):
    i, j = g.edges[:, 0], g.edges[:, 1]
    fi, fj = free_map[i], free_map[j]
    both = (fi >= 0) & (fj >= 0)
    rows = [fi[fi >= 0], fj[fj >= 0], fi[both], fj[both]]
    cols = [fi[fi >= 0], fj[fj >= 0], fj[both], fi[both]]
    vals = [weights[fi >= 0], weights[fj >= 0], -weights[both], -weights[both]]
    return sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_free, n_free),
    )


def minimize_crude(g: GasketLevel, p: float, fixed_ids, fixed_values, u0=None,
                   gtol: float = NEWTON_GTOL, max_iter: int = 500):
    """Minimize the crude energy with prescribed values on ``fixed_ids``.

    Damped Newton on the free vertices with a sparse weighted-Laplacian
    Hessian.  Returns ``(values, crude_energy)``.
    """
    n = g.n_vertices
    fixed_ids = np.asarray(fixed_ids)
    free = np.ones(n, dtype=bool)
    free[fixed_ids] = False
    free_map = -np.ones(n, dtype=np.int64)
    free_map[free] = np.arange(free.sum())
    n_free = int(free.sum())
    edges = g.edges

    u = np.zeros(n) if u0 is None else np.array(u0, dtype=float)
    u[fixed_ids] = fixed_values
    if n_free == 0:
        return u, _edge_energy(u, edges, p)
    if u0 is None:
        # harmonic (p = 2) solution as the starting point
        L = _laplacian(g, np.ones(edges.shape[0]), free_map, n_free)
        rhs = -(_edge_gradient(u, edges, 2.0) / 2.0)[free]
        u[free] += spla.spsolve(L, rhs)

    f = _edge_energy(u, edges, p)
    gnorm = np.inf
    for _ in range(max_iter):
        grad = _edge_gradient(u, edges, p, snap=True)[free]
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= gtol:
            return u, f
        d = np.abs(u[edges[:, 0]] - u[edges[:, 1]])
        h = _hess_weight(d, p)
        H = _laplacian(g, h, free_map, n_free)
        H = H + sp.identity(n_free, format="csc") * (1e-12 * (1.0 + H.diagonal().max()))
        step = -spla.spsolve(H, grad)
        slope = float(step @ grad)
        if (np.max(np.abs(step)) <= _STEP_FLOOR * max(1.0, float(np.max(np.abs(u))))
                or abs(slope) <= _ROUNDOFF * f):
            return u, f
        if not slope < 0:
            step, slope = -grad, -float(grad @ grad)
        t = 1.0
        for _ls in range(60):
            trial = u.copy()
            trial[free] += t * step
            ft = _edge_energy(trial, edges, p)
            if ft <= f + 1e-4 * t * slope + _ROUNDOFF * abs(f):
                break
            t *= 0.5
        else:
            # no decrease representable: at roundoff floor
            if gnorm <= 1e3 * gtol:
                return u, f
            raise ConvergenceError(
                f"line search failed in constrained energy minimization "
                f"(gradient norm {gnorm:.3e})",
                achieved=gnorm,
            )
        u, f = trial, ft
    raise ConvergenceError(
        f"constrained energy minimization hit {max_iter} iterations "
        f"(gradient norm {gnorm:.3e})",
        achieved=gnorm,
    )


def minimal_boundary_energies(p: float, max_level: int):
    """Yield ``(m, rho_m)``: minimal crude level-m energy for corner data (0, 0, 1)."""
    bvals = np.array([0.0, 0.0, 1.0])
    yield 0, float(a_p(0.0, 0.0, 1.0, p))
    u = None
    prev = build_level(0)
    u_prev = bvals.copy()
    for m in range(1, max_level + 1):
        g = build_level(m)
        u0 = extend_values(u_prev, prev, p)
        u, rho = minimize_crude(g, p, g.boundary, bvals, u0=u0)
        yield m, rho
        prev, u_prev = g, u


def default_rp_tolerance(p: float) -> float:
    """1e-9 at p = 2, where the ratios are exact from level 1; 1e-6 otherwise."""
    return 1e-9 if p == 2 else 1e-6


def estimate_rp(p: float, tol: float = 1e-9, max_level: int = RP_MAX_LEVEL,
                return_levels: bool = False):
    """Estimate the renormalization factor by ratios of minimal energies.

    ``rho_m`` is the least crude level-m energy among functions equal to
    (0, 0, 1) on the corners; the estimate is ``rho_m / rho_{m-1}`` once two
    successive ratios agree within ``tol``.
    """
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    ratios = []
    rho_prev = None
    for m, rho in minimal_boundary_energies(p, max_level):
        if rho_prev is not None:
            ratios.append(rho / rho_prev)
            log.debug("r_p estimate p=%g level %d: %.15g", p, m, ratios[-1])
            if len(ratios) >= 2 and abs(ratios[-1] - ratios[-2]) < tol:
                r = ratios[-1]
                if not 0 < r < 1:
                    raise ConvergenceError(f"ratio {r} left (0, 1)", achieved=r)
                return (r, m) if return_levels else r
        rho_prev = rho
    last = ratios[-2:]
    raise ConvergenceError(
        f"r_p ratios did not settle within {tol:g} by level {max_level}; "
        f"last two ratios {last[0]:.15g}, {last[1]:.15g}",
        achieved=abs(last[1] - last[0]),
    )


def rp_cache_path() -> Path:
    env = os.environ.get("GASKET_PLAP_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "gasket_plap" / "rp_cache.json"


def _rp_key(p: float) -> str:
    return f"{float(p):.17g}"


def cached_rp(p: float, tol: float = 1e-9, path=None) -> float:
    """``estimate_rp`` backed by the JSON sidecar cache."""
    path = Path(path) if path is not None else rp_cache_path()
    data = {}
    if path.exists():
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            log.warning("ignoring unreadable r_p cache %s", path)
            data = {}
    entry = data.get(_rp_key(p))
    if entry is not None and entry["tol"] <= tol:
        return float(entry["r_p"])
    r, levels = estimate_rp(p, tol, return_levels=True)
    data[_rp_key(p)] = {"r_p": r, "tol": tol, "levels_used": levels}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=1, sort_keys=True))
    except OSError as exc:
        log.warning("could not write r_p cache %s: %s", path, exc)
    return r


# ---------------------------------------------------------------------------
# sup-norm embedding


@dataclass(frozen=True)
class EmbeddingResult:
    K: float
    vertex: int
    extremal: FractalFunction
    per_vertex: np.ndarray


def embedding_extremal(g: GasketLevel, em: EnergyModel) -> EmbeddingResult:
    """Sharp discrete constant in ``||u||_inf <= K ||u||_E`` plus its extremal.

    For each interior vertex x the least renormalized energy of a Dirichlet
    function with ``u(x) = 1`` is found; ``K = max_x (min energy)^(-1/p)``.
    The returned extremal has sup-norm 1 at ``vertex``.
    """
    _check_model(g, em)
    if g.level < 1:
        raise ValueError("embedding constant needs level >= 1 (level 0 has no interior)")
    best = (-np.inf, -1, None)
    per_vertex = np.full(g.n_vertices, np.nan)
    fixed = np.array([0, 1, 2, 0])
    vals = np.array([0.0, 0.0, 0.0, 1.0])
    for x in g.interior:
        fixed[3] = x
        u, crude = minimize_crude(g, em.p, fixed, vals)
        k = (crude * em.factor) ** (-1.0 / em.p)
        per_vertex[x] = k
        if k > best[0]:
            best = (k, int(x), u)
    k, x, u = best
    return EmbeddingResult(float(k), x, FractalFunction(g.level, u, dirichlet=True), per_vertex)


def embedding_constant(g: GasketLevel, em: EnergyModel) -> float:
    return embedding_extremal(g, em).K
