"""Kirchhoff term, Euler functional, Nehari set and the lambda thresholds.

Notation used throughout (u a nonzero Dirichlet function, ``N = ||u||_E``)::

    A = a N^{p(k+1)}      B = b N^p
    F = int f |u|^q dmu   G = int g |u|^l dmu

so that ``M(N^p) N^p = A + B`` and the Euler functional is
``A/(p(k+1)) + B/p - lam F/q - G/l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .energy import EnergyModel, energy_gradient_values, energy_value
from .errors import DegenerateInputError, DimensionError, SpecError
from .gasket import FractalFunction, GasketLevel, check_level, integrate

MEMBERSHIP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Problem constants and coefficient samples at the working level.

    ``lam`` is the parameter lambda (``lambda`` is reserved in Python).
    """

    a: float
    b: float
    k: float
    p: float
    q: float
    l: float
    lam: float
    f_values: np.ndarray
    g_values: np.ndarray
    level: int

    def __post_init__(self):
        validate_constants(self.a, self.b, self.k, self.p, self.q, self.l, self.lam)
        n = (3 ** (self.level + 1) + 3) // 2
        for name in ("f_values", "g_values"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise DimensionError(
                    f"{name} must have {n} entries at level {self.level}, got shape {arr.shape}"
                )
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def with_lambda(self, lam: float) -> "ProblemSpec":
        return ProblemSpec(self.a, self.b, self.k, self.p, self.q, self.l, lam,
                           self.f_values, self.g_values, self.level)

    def restrict(self, level: int) -> "ProblemSpec":
        """Same problem on a coarser level (vertex ids nest as prefixes)."""
        if level > self.level:
            raise DimensionError(f"cannot restrict level {self.level} to {level}")
        n = (3 ** (level + 1) + 3) // 2
        return ProblemSpec(self.a, self.b, self.k, self.p, self.q, self.l, self.lam,
                           self.f_values[:n], self.g_values[:n], level)

    def constants(self) -> dict:
        return {"a": self.a, "b": self.b, "k": self.k, "p": self.p,
                "q": self.q, "l": self.l, "lambda": self.lam, "level": self.level}


def validate_constants(a, b, k, p, q, l, lam=None) -> None:
    """Raise :class:`SpecError` naming the violated condition."""
    for name, val in (("a", a), ("b", b), ("k", k)):
        if not val > 0:
            raise SpecError(f"requires {name} > 0 (M(t) = a t^k + b with a, b, k > 0); got {name}={val}")
    if lam is not None and not lam > 0:
        raise SpecError(f"requires lambda > 0; got lambda={lam}")
    if not p > 1:
        raise SpecError(f"requires p > 1; got p={p}")
    if not 1 < q < p:
        raise SpecError(f"requires 1 < q < p; got q={q}, p={p}")
    if not p * (k + 1) < l:
        raise SpecError(
            f"requires p(k+1) < l; got p(k+1)={p * (k + 1):g}, l={l}"
        )


def _check(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel | None = None):
    check_level(u, g)
    if spec.level != g.level:
        raise DimensionError(f"problem is at level {spec.level}, graph at level {g.level}")
    if em is not None:
        if em.level != g.level:
            raise DimensionError(f"energy model is at level {em.level}, graph at level {g.level}")
        if em.p != spec.p:
            raise DimensionError(f"energy model has p={em.p}, problem has p={spec.p}")


def kirchhoff(t: float, spec) -> float:
    """``M(t) = a t^k + b``."""
    if t < 0:
        raise ValueError(f"M is evaluated at t >= 0, got {t}")
    return spec.a * t ** spec.k + spec.b


def mhat(s: float, spec) -> float:
    """Antiderivative of M vanishing at 0."""
    if s < 0:
        raise ValueError(f"M-hat is evaluated at s >= 0, got {s}")
    return spec.a * s ** (spec.k + 1) / (spec.k + 1) + spec.b * s


def f_integral(u: FractalFunction, spec: ProblemSpec, g: GasketLevel) -> float:
    _check(u, spec, g)
    return integrate(g, spec.f_values * np.abs(u.values) ** spec.q)


def g_integral(u: FractalFunction, spec: ProblemSpec, g: GasketLevel) -> float:
    _check(u, spec, g)
    return integrate(g, spec.g_values * np.abs(u.values) ** spec.l)


@dataclass(frozen=True)
class Terms:
    """The four scalar ingredients of every identity in this module."""

    energy: float  # N^p
    A: float
    B: float
    F: float
    G: float


def terms_values(values: np.ndarray, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> Terms:
    e = energy_value(values, g, em)
    w = g.weights
    au = np.abs(values)
    F = float(w @ (spec.f_values * au ** spec.q))
    G = float(w @ (spec.g_values * au ** spec.l))
    return Terms(e, spec.a * e ** (spec.k + 1), spec.b * e, F, G)


def terms(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> Terms:
    _check(u, spec, g, em)
    return terms_values(u.values, spec, g, em)


def euler_from_terms(t: Terms, spec) -> float:
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    return t.A / (p * (k + 1)) + t.B / p - spec.lam * t.F / q - t.G / l


def euler_functional(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> float:
    """``I(u) = M-hat(||u||^p)/p - lam F/q - G/l``."""
    if not u.dirichlet:
        raise ValueError("the Euler functional is defined on Dirichlet functions")
    t = terms(u, spec, g, em)
    return mhat(t.energy, spec) / spec.p - spec.lam * t.F / spec.q - t.G / spec.l


def euler_eliminating_g(t: Terms, spec) -> float:
    """Value of I on the Nehari set with G eliminated (uses F only)."""
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    return ((1 / (p * (k + 1)) - 1 / l) * t.A + (1 / p - 1 / l) * t.B
            - (1 / q - 1 / l) * spec.lam * t.F)


def euler_eliminating_f(t: Terms, spec) -> float:
    """Value of I on the Nehari set with F eliminated (uses G only)."""
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    return ((1 / (p * (k + 1)) - 1 / q) * t.A + (1 / p - 1 / q) * t.B
            + (1 / q - 1 / l) * t.G)


def residual_from_terms(t: Terms, spec) -> float:
    return t.A + t.B - spec.lam * t.F - t.G


def nehari_residual(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> float:
    """``M(||u||^p) ||u||^p - lam F - G``; zero exactly on the Nehari set."""
    if not np.any(u.values):
        raise DegenerateInputError("the Nehari set excludes the zero function")
    return residual_from_terms(terms(u, spec, g, em), spec)


def phi2_general(t: Terms, spec) -> float:
    """Second fibering derivative at t = 1, valid for any u."""
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    return ((p * (k + 1) - 1) * t.A + (p - 1) * t.B
            - spec.lam * (q - 1) * t.F - (l - 1) * t.G)


def phi2_f_form(t: Terms, spec) -> float:
    """Second fibering derivative at 1 on the Nehari set, G eliminated."""
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    return (p * (k + 1) - l) * t.A + (p - l) * t.B + spec.lam * (l - q) * t.F


def phi2_g_form(t: Terms, spec) -> float:
    """Second fibering derivative at 1 on the Nehari set, F eliminated."""
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    return (p * (k + 1) - q) * t.A + (p - q) * t.B + (q - l) * t.G


class NehariTag(str, Enum):
    PLUS = "Plus"
    ZERO = "Zero"
    MINUS = "Minus"
    NOT_MEMBER = "NotMember"


@dataclass(frozen=True)
class NehariClass:
    tag: NehariTag
    residual: float
    phi2: float
    scale: float


def classify_terms(t: Terms, spec, tol: float = MEMBERSHIP_TOL, floor: float = 0.0) -> NehariClass:
    """Membership and tag with tolerances relative to ``max(floor, A + B)``.

    The default ``floor = 0`` keeps the test scale-free, so a small member
    is not mistaken for a degenerate one; ``floor = 1`` reproduces the
    absolute-floored variant.
    """
    scale = max(floor, t.A + t.B)
    res = residual_from_terms(t, spec)
    if abs(res) > tol * scale:
        return NehariClass(NehariTag.NOT_MEMBER, res, phi2_general(t, spec), scale)
    phi2 = phi2_f_form(t, spec)
    if phi2 > tol * scale:
        tag = NehariTag.PLUS
    elif phi2 < -tol * scale:
        tag = NehariTag.MINUS
    else:
        tag = NehariTag.ZERO
    return NehariClass(tag, res, phi2, scale)


def classify(u: FractalFunction, spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
             tol: float = MEMBERSHIP_TOL, floor: float = 0.0) -> NehariClass:
    """Nehari membership and M+/M0/M- tag, scale-free."""
    if not np.any(u.values):
        raise DegenerateInputError("the Nehari set excludes the zero function")
    return classify_terms(terms(u, spec, g, em), spec, tol, floor)


def euler_gradient_values(values, spec: ProblemSpec, g: GasketLevel, em: EnergyModel) -> np.ndarray:
    """Gradient of I with respect to vertex values (boundary entries zeroed)."""
    e = energy_value(values, g, em)
    grad_e = energy_gradient_values(values, g, em)
    au = np.abs(values)
    src = g.weights * (spec.lam * spec.f_values * au ** (spec.q - 1)
                       + spec.g_values * au ** (spec.l - 1)) * np.sign(values)
    out = kirchhoff(e, spec) / spec.p * grad_e - src
    out[g.boundary] = 0.0
    return out


# ---------------------------------------------------------------------------
# thresholds


@dataclass(frozen=True)
class Thresholds:
    lambda2: float
    lambda3: float
    lambda1: float
    lambda_hat1: float
    delta1: float
    K_used: float
    f_norm: float
    g_norm: float

    def as_dict(self) -> dict:
        return {
            "lambda2": self.lambda2, "lambda3": self.lambda3, "lambda1": self.lambda1,
            "lambda_hat1": self.lambda_hat1, "delta1": self.delta1, "K": self.K_used,
            "f_norm": self.f_norm, "g_norm": self.g_norm,
        }


def coefficient_norms(spec: ProblemSpec, g: GasketLevel) -> tuple[float, float]:
    """``(int |f| dmu, int |g| dmu)`` with the normalized measure."""
    return integrate(g, np.abs(spec.f_values)), integrate(g, np.abs(spec.g_values))


def nehari_minus_radii(spec, K: float, g_norm: float) -> tuple[float, float]:
    """Lower bounds on ``||u||`` valid on M- (from the G-form of phi'').

    Returns ``(R_a, R_b)`` from the A-term and the B-term respectively.
    """
    p, k, q, l, a, b = spec.p, spec.k, spec.q, spec.l, spec.a, spec.b
    pk1 = p * (k + 1)
    r_a = ((pk1 - q) * a / (g_norm * K ** l * (l - q))) ** (1 / (l - pk1))
    r_b = ((p - q) * b / (g_norm * K ** l * (l - q))) ** (1 / (l - p))
    return r_a, r_b


def thresholds(spec, K: float, f_norm: float, g_norm: float) -> Thresholds:
    """lambda_2, lambda_3, lambda_1, hat-lambda_1 and delta_1 at ``spec.lam``.

    ``delta1`` is the larger of the two M- energy lower bounds whose
    validity condition holds at ``spec.lam``; NaN when neither holds.
    """
    p, k, q, l, a, b, lam = spec.p, spec.k, spec.q, spec.l, spec.a, spec.b, spec.lam
    validate_constants(a, b, k, p, q, l)
    if not (K > 0 and f_norm > 0 and g_norm > 0):
        raise SpecError(f"thresholds need K, f_norm, g_norm > 0; got {K}, {f_norm}, {g_norm}")
    pk1 = p * (k + 1)
    lam2 = ((pk1 - q) * a / (g_norm * K ** l * (l - q))) ** ((pk1 - q) / (l - pk1)) \
        * ((l - pk1) * a / ((l - q) * f_norm * K ** q))
    lam3 = ((p - q) * b / (g_norm * K ** l * (l - q))) ** ((p - q) / (l - p)) \
        * ((l - p) * b / ((l - q) * f_norm * K ** q))
    lam1 = min(lam2, lam3)
    lam_hat1 = min((q / p) * lam3, (q / pk1) * lam2)

    r_a, r_b = nehari_minus_radii(spec, K, g_norm)
    c_lam = (1 / q - 1 / l) * lam * f_norm * K ** q
    candidates = []
    if lam < (q / p) * lam3:
        candidates.append(r_b ** q * ((1 / p - 1 / l) * b * r_b ** (p - q) - c_lam))
    if lam < (q / pk1) * lam2:
        candidates.append(r_a ** q * ((1 / pk1 - 1 / l) * a * r_a ** (pk1 - q) - c_lam))
    delta1 = max(candidates) if candidates else math.nan
    return Thresholds(lam2, lam3, lam1, lam_hat1, delta1, K, f_norm, g_norm)


def nehari_lower_bound(norm: float, spec, K: float, f_norm: float) -> float:
    """Lower bound for I on the Nehari set as a function of ``||u||``."""
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    return ((1 / (p * (k + 1)) - 1 / l) * spec.a * norm ** (p * (k + 1))
            + (1 / p - 1 / l) * spec.b * norm ** p
            - (1 / q - 1 / l) * spec.lam * norm ** q * K ** q * f_norm)


def coercivity_probe(spec: ProblemSpec, g: GasketLevel, em: EnergyModel,
                     u: FractalFunction, t_grid) -> np.ndarray:
    """Table of ``(t, I(t u))`` along the ray through ``u``."""
    if not np.any(u.values):
        raise DegenerateInputError("probe direction must be nonzero")
    tr = terms(u, spec, g, em)
    t = np.asarray(t_grid, dtype=float)
    p, k, q, l = spec.p, spec.k, spec.q, spec.l
    vals = (tr.A / (p * (k + 1)) * t ** (p * (k + 1)) + tr.B / p * t ** p
            - spec.lam * tr.F / q * t ** q - tr.G / l * t ** l)
    return np.column_stack([t, vals])
