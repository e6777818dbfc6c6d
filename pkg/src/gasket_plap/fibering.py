"""Fibering maps ``phi_u(t) = I(t u)`` and projections onto the Nehari set.

With the coefficients of :class:`~gasket_plap.functional.Terms`::

    phi(t)  = A t^P/P + B t^p/p - lam F t^q/q - G t^l/l,      P = p(k+1)

Root finding works on ``psi(t) = phi'(t) / t^(q-1)``, which is
``A t^(P-q) + B t^(p-q) - lam F - G t^(l-q)``.  Its derivative is
``t^(p-q-1) chi(t)`` with ``chi(t) = (P-q) A t^(pk) + (p-q) B - (l-q) G t^(l-p)``.
For G > 0, chi is positive at 0, rises, then falls to -inf, so it has a single
positive zero ``t_c`` and psi is unimodal with its peak at ``t_c``.  For
G <= 0, psi is increasing.  That settles every case without scanning:

* Case I   (F <= 0, G <= 0): psi >= 0 on (0, inf), no roots.
* Case II  (F > 0, G <= 0): one root, a local minimum of phi.
* Case III (F <= 0, G > 0): one root beyond t_c, a local maximum.
* Case IV  (F > 0, G > 0): two roots straddling t_c when psi(t_c) > 0,
  a double root when psi(t_c) = 0, none when lambda is too large.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .energy import EnergyModel
from .errors import ConvergenceError, DegenerateInputError, ProjectionUnavailable
from .functional import ProblemSpec, Terms, terms
from .gasket import FractalFunction, GasketLevel

log = logging.getLogger(__name__)

ROOT_TOL = 1e-10


@dataclass(frozen=True)
class FiberingProfile:
    A: float
    B: float
    F: float
    G: float
    p: float
    q: float
    l: float
    k: float
    lam: float

    def __post_init__(self):
        if self.A < 0 or self.B < 0:
            raise ValueError(f"A and B must be nonnegative, got A={self.A}, B={self.B}")
        if self.A == 0 and self.B == 0:
            raise DegenerateInputError("A = B = 0 means u = 0, which has no fibering map")

    @property
    def P(self) -> float:
        return self.p * (self.k + 1)

    @classmethod
    def from_terms(cls, t: Terms, spec) -> "FiberingProfile":
        return cls(t.A, t.B, t.F, t.G, spec.p, spec.q, spec.l, spec.k, spec.lam)

    def scaled(self, c: float) -> "FiberingProfile":
        """Profile of ``c u`` for ``c > 0``."""
        return FiberingProfile(
            c ** self.P * self.A, c ** self.p * self.B, c ** self.q * self.F,
            c ** self.l * self.G, self.p, self.q, self.l, self.k, self.lam,
        )

    def with_lambda(self, lam: float) -> "FiberingProfile":
        return FiberingProfile(self.A, self.B, self.F, self.G, self.p, self.q,
                               self.l, self.k, lam)


def profile(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> FiberingProfile:
    if not np.any(u.values):
        raise DegenerateInputError("fibering map of the zero function is undefined")
    return FiberingProfile.from_terms(terms(u, spec, g, em), spec)


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("fibering maps are evaluated at t > 0")
    return t


def phi(t, prof: FiberingProfile):
    t = _check_t(t)
    P, p, q, l = prof.P, prof.p, prof.q, prof.l
    return (prof.A / P * t ** P + prof.B / p * t ** p
            - prof.lam * prof.F / q * t ** q - prof.G / l * t ** l)


def phi_prime(t, prof: FiberingProfile):
    t = _check_t(t)
    P, p, q, l = prof.P, prof.p, prof.q, prof.l
    return (prof.A * t ** (P - 1) + prof.B * t ** (p - 1)
            - prof.lam * prof.F * t ** (q - 1) - prof.G * t ** (l - 1))


def phi_double_prime(t, prof: FiberingProfile):
    t = _check_t(t)
    P, p, q, l = prof.P, prof.p, prof.q, prof.l
    return ((P - 1) * prof.A * t ** (P - 2) + (p - 1) * prof.B * t ** (p - 2)
            - prof.lam * (q - 1) * prof.F * t ** (q - 2) - (l - 1) * prof.G * t ** (l - 2))


def _psi(t: float, prof: FiberingProfile) -> float:
    P, p, q, l = prof.P, prof.p, prof.q, prof.l
    return (prof.A * t ** (P - q) + prof.B * t ** (p - q)
            - prof.lam * prof.F - prof.G * t ** (l - q))


def _chi(t: float, prof: FiberingProfile) -> float:
    P, p, q, l, k = prof.P, prof.p, prof.q, prof.l, prof.k
    return (P - q) * prof.A * t ** (p * k) + (p - q) * prof.B - (l - q) * prof.G * t ** (l - p)


def classify_case(prof: FiberingProfile) -> str:
    if prof.F <= 0 and prof.G <= 0:
        return "I"
    if prof.F > 0 and prof.G <= 0:
        return "II"
    if prof.F <= 0:
        return "III"
    return "IV"


def natural_scale(prof: FiberingProfile) -> float:
    """``(B/G)^(1/(l-p))`` when G > 0, else 1."""
    if prof.G > 0:
        return (prof.B / prof.G) ** (1.0 / (prof.l - prof.p))
    return 1.0


def _bracket_root(fn, s0: float, sign_at_lo: float, direction: int, max_doublings=400):
    """Walk ``s`` (log t) from ``s0`` in ``direction`` until ``fn`` has sign ``sign_at_lo``."""
    s, step = s0, 1.0
    for _ in range(max_doublings):
        s = s + direction * step
        v = fn(s)
        if v == 0 or math.copysign(1.0, v) == sign_at_lo:
            return s
        step *= 2.0
        if abs(s) > 700:
            break
    raise ConvergenceError(f"could not bracket fibering root from log t = {s0}")


def _solve_log(fn, lo: float, hi: float) -> float:
    flo, fhi = fn(lo), fn(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    return brentq(fn, lo, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)


def peak_location(prof: FiberingProfile) -> float:
    """Unique zero ``t_c`` of chi (G > 0 only): where psi peaks."""
    if prof.G <= 0:
        raise ValueError("psi is increasing when G <= 0; there is no peak")
    fn = lambda s: _chi(math.exp(s), prof)  # noqa: E731
    s0 = math.log(natural_scale(prof))
    lo = s0 if fn(s0) > 0 else _bracket_root(fn, s0, 1.0, -1)
    hi = _bracket_root(fn, lo, -1.0, +1)
    return math.exp(_solve_log(fn, lo, hi))


def two_root_lambda_limit(prof: FiberingProfile) -> float:
    """Largest lambda keeping two roots in Case IV (psi(t_c) = 0 there)."""
    if classify_case(prof) != "IV":
        raise ValueError("the two-root regime only exists in Case IV")
    tc = peak_location(prof)
    P, p, q, l = prof.P, prof.p, prof.q, prof.l
    return (prof.A * tc ** (P - q) + prof.B * tc ** (p - q) - prof.G * tc ** (l - q)) / prof.F


@dataclass(frozen=True)
class FiberingRoots:
    case_tag: str
    roots: list = field(default_factory=list)  # (t, kind) pairs, ascending t
    regime: str = "ok"

    @property
    def ts(self):
        return [t for t, _ in self.roots]


def _term_scale(t: float, prof: FiberingProfile) -> float:
    P, p, q, l = prof.P, prof.p, prof.q, prof.l
    return (abs(prof.A) * t ** (P - 1) + abs(prof.B) * t ** (p - 1)
            + abs(prof.lam * prof.F) * t ** (q - 1) + abs(prof.G) * t ** (l - 1))


def _polish(t: float, prof: FiberingProfile, tol: float) -> float:
    best, best_val = t, abs(float(phi_prime(t, prof)))
    for _ in range(3):
        d2 = float(phi_double_prime(best, prof))
        if d2 == 0:
            break
        cand = best - float(phi_prime(best, prof)) / d2
        if not cand > 0:
            break
        val = abs(float(phi_prime(cand, prof)))
        if val < best_val:
            best, best_val = cand, val
        else:
            break
    if best_val > tol * _term_scale(best, prof):
        raise ConvergenceError(
            f"fibering root at t={best:.17g} has |phi'|={best_val:.3e}, above tolerance",
            achieved=best_val,
        )
    return best


def _kind(t: float, prof: FiberingProfile) -> str:
    d2 = float(phi_double_prime(t, prof))
    if d2 > 0:
        return "LocalMin"
    if d2 < 0:
        return "LocalMax"
    return "Inflection"


def find_roots(prof: FiberingProfile, tol: float = ROOT_TOL) -> FiberingRoots:
    """All positive critical points of the fibering map."""
    case = classify_case(prof)
    if case == "I":
        return FiberingRoots(case, [], "none")
    psi_log = lambda s: _psi(math.exp(s), prof)  # noqa: E731

    if case == "II":
        s0 = math.log((prof.lam * prof.F / prof.B) ** (1.0 / (prof.p - prof.q)))
        # psi(s0) >= 0 since the A term is positive and -G >= 0, up to roundoff
        hi = s0 if psi_log(s0) >= 0 else _bracket_root(psi_log, s0, 1.0, +1)
        lo = _bracket_root(psi_log, s0, -1.0, -1)
        t = _polish(math.exp(_solve_log(psi_log, lo, hi)), prof, tol)
        return FiberingRoots(case, [(t, _kind(t, prof))])

    tc = peak_location(prof)
    sc = math.log(tc)
    peak = _psi(tc, prof)
    found = []
    if case == "III":
        hi = _bracket_root(psi_log, sc, -1.0, +1)
        found.append(_solve_log(psi_log, sc, hi))
        regime = "ok"
    else:
        peak_scale = prof.A * tc ** (prof.P - prof.q) + prof.B * tc ** (prof.p - prof.q) \
            + prof.lam * prof.F + prof.G * tc ** (prof.l - prof.q)
        if abs(peak) <= tol * peak_scale:
            log.warning("fibering map has a degenerate double root at t=%.6g (M0 contact)", tc)
            t = tc
            return FiberingRoots(case, [(t, "Inflection")], "double-root")
        if peak < 0:
            return FiberingRoots(case, [], "no-roots")
        lo = _bracket_root(psi_log, sc, -1.0, -1)
        hi = _bracket_root(psi_log, sc, -1.0, +1)
        found.append(_solve_log(psi_log, lo, sc))
        found.append(_solve_log(psi_log, sc, hi))
        regime = "two-roots"
    roots = []
    for s in found:
        t = _polish(math.exp(s), prof, tol)
        roots.append((t, _kind(t, prof)))
    return FiberingRoots(case, roots, regime)


def branch_root(prof: FiberingProfile, branch: str, tol: float = ROOT_TOL) -> float:
    """Scale ``t*`` putting ``t* u`` on M+ (``branch='plus'``) or M- (``'minus'``)."""
    want = {"plus": "LocalMin", "minus": "LocalMax"}[branch]
    fr = find_roots(prof, tol)
    for t, kind in fr.roots:
        if kind == want:
            return t
    raise ProjectionUnavailable(
        f"no {branch} projection: case {fr.case_tag}, regime {fr.regime}, lambda={prof.lam:g}",
        case=fr.case_tag, regime=fr.regime,
    )


def project_plus(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> FractalFunction:
    """``t u`` on M+ with t the local-minimum root of the fibering map."""
    return u.scaled(branch_root(profile(u, spec, g, em), "plus"))


def project_minus(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> FractalFunction:
    """``t u`` on M- with t the local-maximum root of the fibering map."""
    return u.scaled(branch_root(profile(u, spec, g, em), "minus"))


def fibering_table(prof: FiberingProfile, t_grid) -> np.ndarray:
    t = _check_t(t_grid)
    return np.column_stack([t, phi(t, prof), phi_prime(t, prof), phi_double_prime(t, prof)])


def write_fibering_csv(table: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "phi", "dphi", "ddphi"])
        for row in table:
            w.writerow([f"{v:.17g}" for v in row])
