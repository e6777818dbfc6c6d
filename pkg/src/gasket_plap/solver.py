"""Minimization of the Euler functional over the two Nehari branches.

A direction ``w`` (Dirichlet, unit energy) is mapped to the branch point
``t*(w) w`` by the fibering root of the requested kind, and the reduced
objective ``J(w) = I(t*(w) w)`` is minimized over directions.  Because
``phi_w'(t*) = 0``, the gradient of J is simply ``t* grad I(t* w)``; no
derivative of ``t*`` is needed.  Steps are preconditioned by the p = 2
renormalized Laplacian on interior vertices (a Sobolev gradient), which makes
the iteration count nearly level-independent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .energy import (EnergyModel, EmbeddingResult, embedding_extremal, energy_gradient_values,
                     energy_hessian_values, energy_value, extend_values)
from .errors import (DegenerateInputError, InfeasibleError, PreconditionError,
                     ProjectionUnavailable)
from .fibering import FiberingProfile, branch_root, phi
from .functional import (NehariClass, NehariTag, ProblemSpec, Thresholds, classify,
                         coefficient_norms, euler_from_terms, euler_gradient_values, kirchhoff,
                         terms_values, thresholds)
from .gasket import FractalFunction, GasketLevel, build_level, check_level

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
SHRINK = 0.5
MULTIMODAL_RTOL = 1e-6
STALL_WINDOW = 50
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class SolveOptions:
    """Knobs for the projected descent.

    The descent stops when the weak residual at ``t* w`` has sup norm at
    most ``grad_tol * max(1, ||M(N^p)/p grad E||_inf)``.
    """

    restarts: int = 8
    max_iters: int = 5000
    step0: float = 1.0
    grad_tol: float = 1e-9
    seed: int = 0
    warm_start_levels: bool = False
    use_extremal_start: bool = True
    polish: bool = True

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be a positive integer")
        if self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")
        if not self.step0 > 0:
            raise ValueError("step0 must be positive")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")


def weak_residual(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel):
    """Per-vertex weak-form residual and its sup norm.

    At interior vertex v the entry is
    ``M(||u||^p) (1/p) dE/du_v - w_v (lam f_v |u_v|^(q-2) u_v + g_v |u_v|^(l-2) u_v)``;
    boundary entries are 0.
    """
    check_level(u, g)
    if not u.dirichlet:
        raise ValueError("weak residual is defined for Dirichlet functions")
    r = euler_gradient_values(u.values, spec, g, em)
    return r, float(np.max(np.abs(r)))


def residual_scale(u: FractalFunction, g: GasketLevel, em: EnergyModel) -> float:
    """``max(1, ||grad E(u)||_inf)``, the yardstick for weak residuals."""
    return max(1.0, float(np.max(np.abs(energy_gradient_values(u.values, g, em)))))


@dataclass
class BranchResult:
    branch: str
    u: FractalFunction
    I: float
    iterations: int
    converged: bool
    restart_values: list
    multimodal: bool
    failures: dict = field(default_factory=dict)

    @property
    def restarts_used(self) -> int:
        return len(self.restart_values)


class _Reduced:
    """``J(w) = I(t*(w) w)`` on one branch at one level."""

    def __init__(self, spec: ProblemSpec, g: GasketLevel, em: EnergyModel, branch: str):
        self.spec, self.g, self.em, self.branch = spec, g, em, branch
        n = g.n_vertices
        interior = g.interior
        free_map = -np.ones(n, dtype=np.int64)
        free_map[interior] = np.arange(interior.size)
        i, j = g.edges[:, 0], g.edges[:, 1]
        fi, fj = free_map[i], free_map[j]
        both = (fi >= 0) & (fj >= 0)
        rows = np.concatenate([fi[fi >= 0], fj[fj >= 0], fi[both], fj[both]])
        cols = np.concatenate([fi[fi >= 0], fj[fj >= 0], fj[both], fi[both]])
        vals = np.concatenate([np.ones((fi >= 0).sum()), np.ones((fj >= 0).sum()),
                               -np.ones(both.sum()), -np.ones(both.sum())])
        lap = sp.csc_matrix((vals, (rows, cols)), shape=(interior.size, interior.size))
        self._lu = splu(lap * (2.0 * em.factor))

    def normalize(self, w: np.ndarray) -> np.ndarray:
        e = energy_value(w, self.g, self.em)
        if not e > 0:
            raise DegenerateInputError("direction has zero energy")
        return w / e ** (1.0 / self.spec.p)

    def evaluate(self, w: np.ndarray):
        """``(J, t*)`` for a unit direction; raises ProjectionUnavailable."""
        tr = terms_values(w, self.spec, self.g, self.em)
        prof = FiberingProfile.from_terms(tr, self.spec)
        t = branch_root(prof, self.branch)
        return float(phi(t, prof)), t

    def gradient(self, w: np.ndarray, t: float):
        """``(grad J, weak residual at t* w)``."""
        res = euler_gradient_values(t * w, self.spec, self.g, self.em)
        return t * res, res

    def term_scale(self, u: np.ndarray) -> float:
        """``max(1, ||M(N^p)/p grad E(u)||_inf)``: size of the stiffness term."""
        e = energy_value(u, self.g, self.em)
        ge = energy_gradient_values(u, self.g, self.em)
        return max(1.0, kirchhoff(e, self.spec) / self.spec.p * float(np.max(np.abs(ge))))

    def precondition(self, gJ: np.ndarray) -> np.ndarray:
        d = np.zeros_like(gJ)
        d[self.g.interior] = self._lu.solve(gJ[self.g.interior])
        return d


def _descend(red: _Reduced, w0: np.ndarray, opts: SolveOptions):
    """Armijo-backtracked Sobolev gradient descent from ``w0``.

    The search direction is scaled to unit length in the preconditioner
    metric, so step sizes are distances on the unit energy sphere no matter
    how large J and its gradient are at a rough start.
    Returns ``(w, J, t, iterations, converged)``.
    """
    w = red.normalize(w0)
    J, t = red.evaluate(w)
    alpha = opts.step0
    history = [J]
    for it in range(opts.max_iters):
        if len(history) > STALL_WINDOW and \
                history[-STALL_WINDOW - 1] - J <= 64 * _EPS * abs(J):
            return w, J, t, it, False
        gJ, res = red.gradient(w, t)
        if np.max(np.abs(res)) <= opts.grad_tol * red.term_scale(t * w):
            return w, J, t, it, True
        d = red.precondition(gJ)
        slope = math.sqrt(max(float(gJ @ d), 0.0))
        if slope == 0.0:
            return w, J, t, it, True
        d /= slope
        a = min(2.0 * alpha, opts.step0)
        while True:
            accepted = False
            try:
                w_new = red.normalize(w - a * d)
                J_new, t_new = red.evaluate(w_new)
                accepted = J_new <= J - ARMIJO_C * a * slope + 16 * _EPS * abs(J)
            except (ProjectionUnavailable, DegenerateInputError):
                pass
            if accepted:
                break
            a *= SHRINK
            if a < 1e-16 * opts.step0:
                # no admissible decrease left at this precision
                log.debug("line search stalled at iteration %d, residual %.3e",
                          it, np.max(np.abs(res)))
                return w, J, t, it, False
        w, J, t, alpha = w_new, J_new, t_new, a
        history.append(J)
    return w, J, t, opts.max_iters, False


def _euler_hessian_solver(u: np.ndarray, spec: ProblemSpec, g: GasketLevel, em: EnergyModel):
    """Solver for the interior Hessian of I at ``u``.

    The Kirchhoff factor contributes a rank-one term ``M'(e)/p grad e grad e^T``,
    handled by Sherman-Morrison around the sparse part.
    """
    p, q, l = spec.p, spec.q, spec.l
    e = energy_value(u, g, em)
    ge = energy_gradient_values(u, g, em)
    au = np.maximum(np.abs(u), 1e-150)
    src = g.weights * (spec.lam * spec.f_values * (q - 1) * au ** (q - 2)
                       + spec.g_values * (l - 1) * au ** (l - 2))
    hess = kirchhoff(e, spec) / p * energy_hessian_values(u, g, em) - sp.diags(src)
    idx = g.interior
    lu = splu(sp.csc_matrix(hess[idx][:, idx]))
    v = ge[idx]
    c = spec.a * spec.k * e ** (spec.k - 1) / p if e > 0 else 0.0
    y = lu.solve(v)
    denom = 1.0 + c * float(v @ y)

    def solve(r):
        x = lu.solve(r)
        return x - y * (c * float(v @ x) / denom)
    return solve


def _newton_polish(u: np.ndarray, spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                   max_steps: int = 30) -> np.ndarray:
    """Newton iteration on ``grad I = 0`` over interior vertices.

    Steps are halved until the sup norm of the residual drops; the iteration
    ends when no step improves it.
    """
    idx = g.interior
    r = euler_gradient_values(u, spec, g, em)
    best = float(np.max(np.abs(r)))
    for _ in range(max_steps):
        try:
            delta = _euler_hessian_solver(u, spec, g, em)(r[idx])
        except RuntimeError:
            break  # singular Hessian
        a, improved = 1.0, False
        for _ in range(12):
            cand = u.copy()
            cand[idx] -= a * delta
            rc = euler_gradient_values(cand, spec, g, em)
            val = float(np.max(np.abs(rc)))
            if val < best:
                u, r, best, improved = cand, rc, val, True
                break
            a *= 0.5
        if not improved:
            break
    return u


def _random_start(rng: np.random.Generator, g: GasketLevel) -> np.ndarray:
    w = rng.standard_normal(g.n_vertices)
    w[g.boundary] = 0.0
    return w


def _solve_from(w0: np.ndarray, spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                branch: str, opts: SolveOptions, reduced: dict):
    """Descent from one start, optionally through coarser levels first."""
    levels = [g.level]
    if opts.warm_start_levels and g.level > 1:
        levels = list(range(max(1, g.level - 2), g.level + 1))
    n0 = (3 ** (levels[0] + 1) + 3) // 2
    w = np.asarray(w0, dtype=float)[:n0]
    total = 0
    for lev in levels:
        if lev not in reduced:
            gl = g if lev == g.level else build_level(lev, g.corners)
            reduced[lev] = _Reduced(spec.restrict(lev), gl, em.at_level(lev), branch)
        red = reduced[lev]
        if w.size < red.g.n_vertices:
            w = extend_values(w, build_level(lev - 1, g.corners), em.p)
        w, J, t, its, ok = _descend(red, w, opts)
        total += its
    u = t * w
    if opts.polish:
        u = _polish_on_branch(u, J, red, opts)
        tr = terms_values(u, red.spec, red.g, red.em)
        J = euler_from_terms(tr, red.spec)
        ok = float(np.max(np.abs(euler_gradient_values(u, red.spec, red.g, red.em)))) \
            <= opts.grad_tol * red.term_scale(u)
    return u, J, total, ok


def _polish_on_branch(u: np.ndarray, J: float, red: _Reduced, opts: SolveOptions) -> np.ndarray:
    """Newton-polished ``u`` if it stays on the same branch near the same value."""
    spec, g, em = red.spec, red.g, red.em
    cand = _newton_polish(u, spec, g, em)
    try:
        tr = terms_values(cand, spec, g, em)
        cand = branch_root(FiberingProfile.from_terms(tr, spec), red.branch) * cand
    except (ProjectionUnavailable, DegenerateInputError):
        return u
    J_new = euler_from_terms(terms_values(cand, spec, g, em), spec)
    if abs(J_new - J) > 1e-6 * max(1.0, abs(J)):
        log.debug("Newton polish left the basin (I %.17g -> %.17g); kept descent point", J, J_new)
        return u
    r_old = np.max(np.abs(euler_gradient_values(u, spec, g, em)))
    r_new = np.max(np.abs(euler_gradient_values(cand, spec, g, em)))
    return cand if r_new < r_old else u


def _starts(g: GasketLevel, opts: SolveOptions, extremal: FractalFunction | None):
    rng = np.random.default_rng(opts.seed)
    starts = [_random_start(rng, g) for _ in range(opts.restarts)]
    if extremal is not None:
        starts.append(np.array(extremal.values))
    return starts


def solve_branch(spec: ProblemSpec, g: GasketLevel, em: EnergyModel, branch: str,
                 opts: SolveOptions = SolveOptions(),
                 extremal: FractalFunction | None = None) -> BranchResult:
    """Best projected local minimum of I on M+ (``'plus'``) or M- (``'minus'``)."""
    if branch not in ("plus", "minus"):
        raise ValueError(f"branch must be 'plus' or 'minus', got {branch!r}")
    check_level(FractalFunction.zeros(g), g)
    interior = g.interior
    if branch == "plus" and not np.any(spec.f_values[interior] > 0):
        raise InfeasibleError("M+ needs a direction with lambda F > 0 (Cases II/IV); "
                              "f is nowhere positive")
    if branch == "minus" and not np.any(spec.g_values[interior] > 0):
        raise InfeasibleError("M- needs a direction with G > 0 (Cases III/IV); "
                              "g is nowhere positive")

    reduced: dict = {}
    results = []
    failures = {}
    total_its = 0
    for idx, w0 in enumerate(_starts(g, opts, extremal if opts.use_extremal_start else None)):
        try:
            u, J, its, ok = _solve_from(w0, spec, g, em, branch, opts, reduced)
        except (ProjectionUnavailable, DegenerateInputError) as exc:
            failures[idx] = str(exc)
            continue
        total_its += its
        results.append((J, idx, u, ok))
    if not results:
        raise InfeasibleError(
            f"no admissible start for the {branch} branch at lambda={spec.lam:g}: "
            + "; ".join(failures.values())
        )
    J, idx, u, ok = min(results, key=lambda r: (r[0], r[1]))
    values = [r[0] for r in sorted(results, key=lambda r: r[1])]
    spread = max(values) - min(values)
    multimodal = spread > MULTIMODAL_RTOL * max(1.0, abs(J))
    if multimodal:
        log.info("%s branch: restarts reached distinct local minima (spread %.3e)", branch, spread)
    return BranchResult(branch, FractalFunction(g.level, u, dirichlet=True), J, total_its, ok,
                        values, multimodal, failures)


def problem_thresholds(spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                       embedding: EmbeddingResult | None = None):
    """Thresholds at the working level with the discrete sharp embedding constant."""
    emb = embedding if embedding is not None else embedding_extremal(g, em)
    f_norm, g_norm = coefficient_norms(spec, g)
    return thresholds(spec, emb.K, f_norm, g_norm), emb


def minimize_on_plus(spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                     opts: SolveOptions = SolveOptions(), th: Thresholds | None = None,
                     embedding: EmbeddingResult | None = None):
    """Minimizer of I on M+ and its value; needs ``lambda < lambda_1``."""
    if th is None:
        th, embedding = problem_thresholds(spec, g, em, embedding)
    if not spec.lam < th.lambda1:
        raise PreconditionError(f"lambda={spec.lam:.17g} must be below lambda1={th.lambda1:.17g}")
    res = solve_branch(spec, g, em, "plus", opts, embedding.extremal if embedding else None)
    return res.u, res.I


def minimize_on_minus(spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                      opts: SolveOptions = SolveOptions(), th: Thresholds | None = None,
                      embedding: EmbeddingResult | None = None):
    """Minimizer of I on M- and its value; needs ``lambda < lambda_hat1``."""
    if th is None:
        th, embedding = problem_thresholds(spec, g, em, embedding)
    if not spec.lam < th.lambda_hat1:
        raise PreconditionError(
            f"lambda={spec.lam:.17g} must be below lambda_hat1={th.lambda_hat1:.17g}")
    res = solve_branch(spec, g, em, "minus", opts, embedding.extremal if embedding else None)
    return res.u, res.I


@dataclass
class SolutionReport:
    u_plus: FractalFunction | None
    u_minus: FractalFunction | None
    I_plus: float
    I_minus: float
    residual_inf_plus: float
    residual_inf_minus: float
    residual_scale_plus: float
    residual_scale_minus: float
    thresholds: Thresholds
    iterations: int
    restarts_used: int
    class_plus: NehariClass | None
    class_minus: NehariClass | None
    restart_values_plus: list = field(default_factory=list)
    restart_values_minus: list = field(default_factory=list)
    multimodal_plus: bool = False
    multimodal_minus: bool = False
    failures: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.u_plus is not None and self.u_minus is not None and not self.failures


def two_solutions(spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                  opts: SolveOptions = SolveOptions(),
                  embedding: EmbeddingResult | None = None) -> SolutionReport:
    """One point of M+ with negative energy and one of M- above delta_1.

    Requires ``lambda < lambda_hat1``.  A branch that cannot be solved leaves
    its fields empty (NaN values) and records the cause in ``failures``;
    violated sign certificates are recorded there as well.
    """
    th, emb = problem_thresholds(spec, g, em, embedding)
    if not spec.lam < th.lambda_hat1:
        raise PreconditionError(
            f"two solutions need lambda < lambda_hat1={th.lambda_hat1:.17g}, got {spec.lam:.17g}")
    return solve_pair(spec, g, em, opts, th, emb)


def solve_pair(spec: ProblemSpec, g: GasketLevel, em: EnergyModel, opts: SolveOptions,
               th: Thresholds, emb: EmbeddingResult) -> SolutionReport:
    """Both branch minimizations without the lambda guard (used by sweeps).

    Certificates that fail (wrong tag, I_plus >= 0, I_minus below delta_1 or
    delta_1 undefined) are listed in ``failures``.
    """
    out = {}
    failures = {}
    for branch in ("plus", "minus"):
        try:
            out[branch] = solve_branch(spec, g, em, branch, opts, emb.extremal)
        except InfeasibleError as exc:
            failures[branch] = str(exc)

    def unpack(branch):
        r = out.get(branch)
        if r is None:
            return None, math.nan, math.nan, math.nan, None, [], False, 0, 0
        _, rinf = weak_residual(r.u, spec, g, em)
        return (r.u, r.I, rinf, residual_scale(r.u, g, em), classify(r.u, spec, g, em),
                r.restart_values, r.multimodal, r.iterations, r.restarts_used)

    up, Ip, rp, sp_, cp, vp, mp, itp, nup = unpack("plus")
    um, Im, rm, sm, cm, vm, mm, itm, num = unpack("minus")
    if cp is not None and cp.tag is not NehariTag.PLUS:
        failures["plus_class"] = f"plus solution classified {cp.tag.value}"
    if cm is not None and cm.tag is not NehariTag.MINUS:
        failures["minus_class"] = f"minus solution classified {cm.tag.value}"
    if up is not None and not Ip < 0:
        failures["plus_sign"] = f"I_plus={Ip:.17g} is not negative"
    if um is not None and math.isnan(th.delta1):
        failures["minus_bound"] = "delta1 is undefined at this lambda (no M- energy bound)"
    elif um is not None and not Im >= th.delta1 - 1e-8:
        failures["minus_bound"] = f"I_minus={Im:.17g} is below delta1={th.delta1:.17g}"
    return SolutionReport(up, um, Ip, Im, rp, rm, sp_, sm, th, itp + itm, nup + num, cp, cm,
                          vp, vm, mp, mm, failures)


@dataclass
class ContinuityTable:
    """Rows ``(eps, t_eps)``: branch projection scales of ``u0 + eps w``.

    ``t_eps`` is NaN where the projection is unavailable.  ``eps0`` is the
    largest ``|eps|`` up to which every row is available and ``|t_eps - 1|``
    grows with ``|eps|`` on both signs; ``slope`` is the least ``C`` with
    ``|t_eps - 1| <= C |eps|`` on those rows.
    """

    branch: str
    rows: list
    slope: float
    eps0: float

    def ratios(self):
        """``(|eps|, |t_eps - 1| / |eps|)`` for nonzero eps within eps0, by size."""
        out = [(abs(e), abs(t - 1.0) / abs(e)) for e, t in self.rows
               if e != 0 and abs(e) <= self.eps0]
        return sorted(out)

    def first_order_spread(self) -> float:
        """Relative gap between the two smallest-|eps| ratios (0 for exact linearity)."""
        r = self.ratios()
        if len(r) < 2 or r[0][1] == 0:
            return math.nan
        return abs(r[1][1] - r[0][1]) / r[0][1]


def perturbation_continuity_check(u0: FractalFunction, w: FractalFunction, eps_ladder,
                                  spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                                  branch: str | None = None) -> ContinuityTable:
    """Projection scales of ``u0 + eps w`` onto the branch containing ``u0``.

    ``w`` is first rescaled to the energy norm of ``u0`` so that ``eps`` is
    a relative perturbation size.
    """
    check_level(u0, g)
    check_level(w, g)
    if not w.dirichlet:
        raise ValueError("perturbation direction must be Dirichlet")
    if branch is None:
        tag = classify(u0, spec, g, em).tag
        if tag not in (NehariTag.PLUS, NehariTag.MINUS):
            raise PreconditionError(f"u0 must lie on M+ or M-, classified {tag.value}")
        branch = "plus" if tag is NehariTag.PLUS else "minus"
    e0 = energy_value(u0.values, g, em)
    ew = energy_value(w.values, g, em)
    if not ew > 0:
        raise DegenerateInputError("perturbation direction has zero energy")
    wv = w.values * (e0 / ew) ** (1.0 / spec.p)
    rows = []
    for eps in eps_ladder:
        v = u0.values + eps * wv
        try:
            tr = terms_values(v, spec, g, em)
            t = branch_root(FiberingProfile.from_terms(tr, spec), branch)
        except (ProjectionUnavailable, DegenerateInputError):
            t = math.nan
        rows.append((float(eps), float(t)))

    eps0 = math.inf
    for sign in (1.0, -1.0):
        side = sorted((r for r in rows if r[0] != 0 and math.copysign(1.0, r[0]) == sign),
                      key=lambda r: abs(r[0]))
        if not side:
            continue
        reach, prev = 0.0, 0.0
        for e, t in side:
            dev = abs(t - 1.0)
            if math.isnan(t) or dev < prev:
                break
            reach, prev = abs(e), dev
        eps0 = min(eps0, reach)
    eps0 = 0.0 if eps0 == math.inf else eps0
    within = [abs(t - 1.0) / abs(e) for e, t in rows if e != 0 and abs(e) <= eps0]
    slope = max(within) if within else math.nan
    return ContinuityTable(branch, rows, slope, eps0)
