"""Residuals and multi-start searches for two factorial-weighted polynomial systems.

Both families share the unknowns ``p_l`` (one per atom, entering squared) and
per-atom coefficient vectors ``q``:

* family ``"rbar"``: one equation per order ``s = 1..r``, summing
  ``p_l^2 q1_l^{n1} q2_l^{n2} / (n1! n2!)`` over ``n1 + 2 n2 = s``;
* family ``"rtilde"``: one equation per pair ``(l1, l2)`` with
  ``1 <= l1 + l2 <= r``, summing ``p_l^2 prod_i q_il^{a_i} / a_i!`` over the
  exponent set ``J(l1, l2) = {a in N^5 : a1 + 2 a2 + a3 = l1,
  a3 + a4 + 2 a5 = l2}``.

A candidate is non-trivial when every ``p_l`` is nonzero and the family's
distinguished column (``q1`` for rbar, ``q4`` for rtilde) has a nonzero
entry.  Residual accumulation runs in extended precision (80-bit long double)
because the factorial-weighted terms cancel heavily.

The multi-start search fixes ``p = 1`` elementwise (harmless: scaling all
``p_l`` by ``t`` scales every residual by ``t^2``) and feeds the distinguished
column through ``u -> u / max|u|``, so non-triviality holds by construction.
A search that fails to drive the residuals to zero is numerical evidence of
unsolvability at that order, never a certificate.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.optimize import minimize

from .model import GmoeError, InvalidParameterError
from .sampling import make_rng

__all__ = [
    "FAMILY_RBAR",
    "FAMILY_RTILDE",
    "PolySystemSpec",
    "Candidate",
    "VerificationReport",
    "SearchResult",
    "enumerate_J",
    "equation_labels",
    "residuals",
    "verify_candidate",
    "search_nontrivial",
    "builtin_candidate",
]

FAMILY_RBAR = "rbar"
FAMILY_RTILDE = "rtilde"
#: Entries with absolute value at most this count as zero in non-triviality checks.
NONTRIVIAL_ZERO_TOL = 1e-12


@dataclass(frozen=True)
class PolySystemSpec:
    """Which system to evaluate: family, number of atoms m, max order r."""

    family: str
    m: int
    r: int

    def __post_init__(self) -> None:
        if self.family not in (FAMILY_RBAR, FAMILY_RTILDE):
            raise InvalidParameterError(f"unknown family {self.family!r}")
        if self.m < 2:
            raise InvalidParameterError("m must be at least 2")
        if self.r < 1:
            raise InvalidParameterError("r must be at least 1")


@dataclass(frozen=True, eq=False)
class Candidate:
    """Candidate solution: p of shape (m,) and q of shape (m, 5).

    The rbar family reads only columns 0 and 1 of ``q``.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        q = np.asarray(self.q, dtype=float)
        if p.ndim != 1:
            raise InvalidParameterError("p must be a vector")
        if q.shape != (p.shape[0], 5):
            raise InvalidParameterError(
                f"q must have shape ({p.shape[0]}, 5), got {q.shape}"
            )
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def m(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class VerificationReport:
    is_solution: bool
    is_nontrivial: bool
    max_abs_residual: float


@dataclass(frozen=True, eq=False)
class SearchResult:
    best: Candidate
    best_residual: float  # max |residual| of the best candidate
    best_objective: float  # sum of squared residuals of the best candidate
    restarts: int


def enumerate_J(l1: int, l2: int) -> list[tuple[int, int, int, int, int]]:
    """All alpha in N^5 with a1 + 2 a2 + a3 = l1 and a3 + a4 + 2 a5 = l2.

    Returned lexicographically sorted and duplicate-free.
    """
    if l1 < 0 or l2 < 0:
        raise InvalidParameterError("l1 and l2 must be nonnegative")
    out = []
    for a2 in range(l1 // 2 + 1):
        for a3 in range(min(l1 - 2 * a2, l2) + 1):
            a1 = l1 - 2 * a2 - a3
            rem = l2 - a3
            for a5 in range(rem // 2 + 1):
                a4 = rem - 2 * a5
                out.append((a1, a2, a3, a4, a5))
    return sorted(out)


def equation_labels(spec: PolySystemSpec) -> tuple:
    """Equation index in residual order.

    rbar: orders ``s = 1..r``.  rtilde: pairs ``(l1, l2)`` sorted by total
    order ``l1 + l2`` and then by ``l1``.
    """
    if spec.family == FAMILY_RBAR:
        return tuple(range(1, spec.r + 1))
    labels = [
        (l1, total - l1) for total in range(1, spec.r + 1) for l1 in range(total + 1)
    ]
    return tuple(labels)


@lru_cache(maxsize=None)
def _system_terms(family: str, r: int):
    """Per-equation monomial exponents and factorial coefficients.

    Returns (alpha, coef, starts, ncols): exponent rows (int64), long-double
    coefficients 1/prod(a_i!), and the start offset of each equation's block.
    """
    alphas: list[tuple[int, ...]] = []
    coefs: list[float] = []
    starts: list[int] = []
    if family == FAMILY_RBAR:
        ncols = 2
        for s in range(1, r + 1):
            starts.append(len(alphas))
            for n2 in range(s // 2 + 1):
                n1 = s - 2 * n2
                alphas.append((n1, n2))
                coefs.append(1.0 / (factorial(n1) * factorial(n2)))
    else:
        ncols = 5
        for l1, l2 in equation_labels(PolySystemSpec(family, 2, r)):
            starts.append(len(alphas))
            for alpha in enumerate_J(l1, l2):
                alphas.append(alpha)
                coefs.append(1.0 / np.prod([factorial(a) for a in alpha]))
    alpha = np.asarray(alphas, dtype=np.int64)
    coef = np.asarray(coefs, dtype=np.longdouble)
    return alpha, coef, np.asarray(starts, dtype=np.intp), ncols


def residuals(spec: PolySystemSpec, cand: Candidate) -> np.ndarray:
    """One residual per equation, in :func:`equation_labels` order.

    Accumulated in long double, returned as float64.
    """
    if cand.m != spec.m:
        raise InvalidParameterError(f"candidate has m = {cand.m}, spec wants {spec.m}")
    alpha, coef, starts, ncols = _system_terms(spec.family, spec.r)
    q = cand.q[:, :ncols].astype(np.longdouble)
    p2 = cand.p.astype(np.longdouble) ** 2
    # (terms, m): integer exponents keep negative bases exact
    mono = np.prod(q[None, :, :] ** alpha[:, None, :], axis=2)
    per_term = (mono @ p2) * coef
    out = np.add.reduceat(per_term, starts)
    return np.asarray(out, dtype=float)


def _is_nontrivial(spec: PolySystemSpec, cand: Candidate, tol: float) -> bool:
    col = 0 if spec.family == FAMILY_RBAR else 3
    return bool(
        np.all(np.abs(cand.p) > tol) and np.any(np.abs(cand.q[:, col]) > tol)
    )


def verify_candidate(
    spec: PolySystemSpec, cand: Candidate, tol: float
) -> VerificationReport:
    """Check whether a candidate solves the system and is non-trivial."""
    res = residuals(spec, cand)
    worst = float(np.max(np.abs(res))) if res.size else 0.0
    return VerificationReport(
        is_solution=worst <= tol,
        is_nontrivial=_is_nontrivial(spec, cand, NONTRIVIAL_ZERO_TOL),
        max_abs_residual=worst,
    )


def builtin_candidate(family: str, m: int) -> Candidate:
    """Reference candidate solving either family's system up to order 3.

    The distinguished column is (1, -1, 0, ...), its companion squared-term
    column is (-1/2, -1/2, 0, ...), all other entries are zero and p is all
    ones.  Non-trivial by construction.
    """
    if family not in (FAMILY_RBAR, FAMILY_RTILDE):
        raise InvalidParameterError(f"unknown family {family!r}")
    if m < 2:
        raise InvalidParameterError("m must be at least 2")
    q = np.zeros((m, 5))
    lead = 0 if family == FAMILY_RBAR else 3
    q[0, lead] = 1.0
    q[1, lead] = -1.0
    q[0, lead + 1] = -0.5
    q[1, lead + 1] = -0.5
    return Candidate(np.ones(m), q)


def _normalize_lead(u: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(u)))
    if peak == 0.0:
        out = np.zeros_like(u)
        out[0] = 1.0
        return out
    return u / peak


def _unpack(spec: PolySystemSpec, theta: np.ndarray) -> Candidate:
    m = spec.m
    q = np.zeros((m, 5))
    if spec.family == FAMILY_RBAR:
        q[:, 0] = _normalize_lead(theta[:m])
        q[:, 1] = theta[m : 2 * m]
    else:
        q[:, 0] = theta[:m]
        q[:, 1] = theta[m : 2 * m]
        q[:, 2] = theta[2 * m : 3 * m]
        q[:, 3] = _normalize_lead(theta[3 * m : 4 * m])
        q[:, 4] = theta[4 * m : 5 * m]
    return Candidate(np.ones(m), q)


def _pack_builtin(spec: PolySystemSpec) -> np.ndarray:
    cand = builtin_candidate(spec.family, spec.m)
    if spec.family == FAMILY_RBAR:
        return np.concatenate([cand.q[:, 0], cand.q[:, 1]])
    return cand.q.T.ravel()


def search_nontrivial(
    spec: PolySystemSpec, restarts: int, seed: int, maxiter: int | None = None
) -> SearchResult:
    """Minimize the sum of squared residuals over non-trivial candidates.

    Restart 0 starts from the built-in order-3 candidate, the rest from
    standard-normal draws on seed-derived streams; each restart runs a
    derivative-free Nelder-Mead descent.  The reported best is the restart
    with the smallest objective, ties broken by restart index, so the result
    is deterministic in ``seed``.  A large ``best_residual`` is evidence (not
    proof) that no non-trivial solution exists at this order.
    """
    if restarts < 1:
        raise InvalidParameterError("restarts must be at least 1")
    ndim = 2 * spec.m if spec.family == FAMILY_RBAR else 5 * spec.m
    if maxiter is None:
        maxiter = 400 * ndim

    def objective(theta: np.ndarray) -> float:
        res = residuals(spec, _unpack(spec, theta))
        return float(res @ res)

    best_obj = np.inf
    best_theta = None
    for i in range(restarts):
        if i == 0:
            theta0 = _pack_builtin(spec)
        else:
            theta0 = make_rng(seed, i).standard_normal(ndim)
        result = minimize(
            objective,
            theta0,
            method="Nelder-Mead",
            options={"maxiter": maxiter, "xatol": 1e-10, "fatol": 1e-16},
        )
        if result.fun < best_obj:
            best_obj = float(result.fun)
            best_theta = np.array(result.x)
    best = _unpack(spec, best_theta)
    res = residuals(spec, best)
    return SearchResult(
        best=best,
        best_residual=float(np.max(np.abs(res))),
        best_objective=best_obj,
        restarts=restarts,
    )
