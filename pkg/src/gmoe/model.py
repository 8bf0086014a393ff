"""Core types and exact densities for Gaussian-gated mixture-of-experts models.

An atom ``theta = (c, Gamma, a, b, nu)`` pairs a Gaussian gate ``N(c, Gamma)``
over the covariate ``X`` with an affine Gaussian expert
``Y | X ~ N(a'X + b, nu)``.  A mixing measure is a finite weighted collection
of atoms; its joint density over ``(X, Y)`` is the weight-averaged product of
gate and expert densities.  Under a single atom the pair ``(X, Y)`` is itself
Gaussian in dimension ``d + 1``:

    psi   = (c, a'c + b)
    Sigma = [[Gamma,      Gamma a        ],
             [(Gamma a)', a'Gamma a + nu ]]

and :func:`to_joint_gaussian` / :func:`from_joint_gaussian` convert between
the two parameterizations exactly.  EM and several identifiability checks
lean on that equivalence.

All covariance work goes through triangular (Cholesky) factorizations, and
every density is evaluated in the log domain; matrices that fail the
factorization are rejected at construction rather than silently repaired.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp

__all__ = [
    "LAMBDA_FLOOR",
    "NU_FLOOR",
    "SYMMETRY_TOL",
    "GmoeError",
    "InvalidParameterError",
    "NuClippedWarning",
    "Component",
    "MixingMeasure",
    "JointGaussian",
    "gaussian_log_pdf",
    "log_joint_density",
    "to_joint_gaussian",
    "from_joint_gaussian",
    "measure_to_json",
    "measure_from_json",
]

#: Smallest admissible covariance eigenvalue.
LAMBDA_FLOOR = 1e-8
#: Smallest admissible expert variance.
NU_FLOOR = 1e-8
#: Maximum tolerated asymmetry for covariance matrices.
SYMMETRY_TOL = 1e-12

_LOG_2PI = float(np.log(2.0 * np.pi))


class GmoeError(Exception):
    """Base class for domain errors raised by this package."""


class InvalidParameterError(GmoeError, ValueError):
    """An input violates a documented precondition or type invariant."""


class NuClippedWarning(RuntimeWarning):
    """A conditional variance fell below its floor and was clipped up to it."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


def _check_cov(M: np.ndarray, floor: float, name: str) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidParameterError(f"{name} must be square, got shape {M.shape}")
    defect = float(np.max(np.abs(M - M.T)))
    if defect > SYMMETRY_TOL:
        raise InvalidParameterError(
            f"{name} is not symmetric: max|M - M'| = {defect:.3e} > {SYMMETRY_TOL:.0e}"
        )
    wmin = float(np.linalg.eigvalsh(M)[0])
    # relative slack: matrices whose eigenvalues were clipped to exactly the
    # floor reconstruct a few ulps below it
    if wmin < floor * (1.0 - 1e-6):
        raise InvalidParameterError(
            f"{name} fails the positive-definiteness floor: "
            f"smallest eigenvalue {wmin:.6e} < {floor:.1e}"
        )


@dataclass(frozen=True, eq=False)
class Component:
    """One mixture atom.

    Attributes
    ----------
    c : ndarray, shape (d,)
        Gate mean.
    Gamma : ndarray, shape (d, d)
        Gate covariance; symmetric with eigenvalues >= ``LAMBDA_FLOOR``.
    a : ndarray, shape (d,)
        Expert slope.
    b : float
        Expert intercept.
    nu : float
        Expert conditional variance, at least ``NU_FLOOR``.

    Scalars are accepted for ``c``, ``Gamma`` and ``a`` when ``d == 1``.
    Arrays are copied and frozen; instances are safe to share across threads.
    """

    c: np.ndarray
    Gamma: np.ndarray
    a: np.ndarray
    b: float
    nu: float

    def __post_init__(self) -> None:
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        Gamma = np.asarray(self.Gamma, dtype=float)
        if Gamma.ndim == 0:
            Gamma = Gamma.reshape(1, 1)
        if c.ndim != 1:
            raise InvalidParameterError(f"c must be a vector, got shape {c.shape}")
        d = c.shape[0]
        if Gamma.shape != (d, d):
            raise InvalidParameterError(
                f"Gamma must have shape ({d}, {d}), got {Gamma.shape}"
            )
        if a.shape != (d,):
            raise InvalidParameterError(f"a must have shape ({d},), got {a.shape}")
        _check_cov(Gamma, LAMBDA_FLOOR, "Gamma")
        b = float(self.b)
        nu = float(self.nu)
        if nu < NU_FLOOR:
            raise InvalidParameterError(f"nu = {nu:.6e} is below the floor {NU_FLOOR:.1e}")
        object.__setattr__(self, "c", _readonly(c))
        object.__setattr__(self, "Gamma", _readonly(Gamma))
        object.__setattr__(self, "a", _readonly(a))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "nu", nu)

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    def stack(self) -> np.ndarray:
        """Flatten to (c, vec Gamma, a, b, nu) with row-major vec."""
        return np.concatenate([self.c, self.Gamma.ravel(), self.a, [self.b, self.nu]])

    def distance(self, other: "Component") -> float:
        """Euclidean distance between stacked parameter vectors."""
        return float(np.linalg.norm(self.stack() - other.stack()))


@dataclass(frozen=True, eq=False)
class MixingMeasure:
    """Finite weighted collection of atoms; weights sum to one.

    When ``beta_floor > 0`` the measure is validated in constrained mode:
    every weight must be at least ``beta_floor``.
    """

    weights: np.ndarray
    components: tuple[Component, ...]
    dim: int = -1
    beta_floor: float = 0.0

    def __post_init__(self) -> None:
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        comps = tuple(self.components)
        if w.ndim != 1:
            raise InvalidParameterError("weights must be a vector")
        if len(comps) == 0:
            raise InvalidParameterError("a mixing measure needs at least one atom")
        if w.shape[0] != len(comps):
            raise InvalidParameterError(
                f"{w.shape[0]} weights for {len(comps)} components"
            )
        if np.any(w <= 0.0):
            raise InvalidParameterError("weights must be strictly positive")
        if self.beta_floor > 0.0 and np.any(w < self.beta_floor - 1e-15):
            raise InvalidParameterError(
                f"some weight is below beta_floor = {self.beta_floor:g}"
            )
        total = float(w.sum())
        if abs(total - 1.0) > 1e-12:
            raise InvalidParameterError(f"weights sum to {total!r}, not 1")
        d = comps[0].dim
        if any(comp.dim != d for comp in comps):
            raise InvalidParameterError("all components must share the same dimension")
        if self.dim >= 0 and self.dim != d:
            raise InvalidParameterError(
                f"declared dim {self.dim} does not match components (d = {d})"
            )
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "dim", d)

    @property
    def k(self) -> int:
        """Number of atoms."""
        return len(self.components)

    def permuted(self, order) -> "MixingMeasure":
        """Same measure with atoms listed in the given order."""
        order = list(order)
        if sorted(order) != list(range(self.k)):
            raise InvalidParameterError("order must be a permutation of the atom indices")
        return MixingMeasure(
            self.weights[order],
            tuple(self.components[i] for i in order),
            beta_floor=self.beta_floor,
        )


@dataclass(frozen=True, eq=False)
class JointGaussian:
    """Gaussian law of the stacked vector (X, Y) in dimension d + 1.

    ``Sigma`` must be symmetric and pass a Cholesky factorization.  No
    eigenvalue floor is imposed here: the joint covariance of a valid atom
    can have a smallest eigenvalue below the per-block floors (the gate and
    expert blocks couple through ``Gamma a``), so flooring it would make the
    forward conversion partial.
    """

    psi: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self) -> None:
        psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        Sigma = np.asarray(self.Sigma, dtype=float)
        if psi.ndim != 1 or psi.shape[0] < 2:
            raise InvalidParameterError("psi must be a vector of length >= 2")
        if Sigma.shape != (psi.shape[0], psi.shape[0]):
            raise InvalidParameterError(
                f"Sigma must have shape {(psi.shape[0],) * 2}, got {Sigma.shape}"
            )
        defect = float(np.max(np.abs(Sigma - Sigma.T)))
        if defect > SYMMETRY_TOL:
            raise InvalidParameterError(
                f"Sigma is not symmetric: max|M - M'| = {defect:.3e} > {SYMMETRY_TOL:.0e}"
            )
        try:
            cholesky(Sigma, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            wmin = float(np.linalg.eigvalsh(Sigma)[0])
            raise InvalidParameterError(
                f"Sigma is not positive definite: offending eigenvalue {wmin:.6e}"
            ) from None
        object.__setattr__(self, "psi", _readonly(psi))
        object.__setattr__(self, "Sigma", _readonly(Sigma))

    @property
    def dim(self) -> int:
        """Covariate dimension d (one less than the stacked dimension)."""
        return self.psi.shape[0] - 1


def _as_rows(x, d: int):
    """Coerce `x` to an (n, d) array; report whether it was a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        if d != 1:
            raise InvalidParameterError(f"scalar x given but d = {d}")
        return x.reshape(1, 1), True
    if x.ndim == 1:
        if x.shape[0] == d:
            return x.reshape(1, d), True
        if d == 1:
            return x.reshape(-1, 1), False
        raise InvalidParameterError(f"x has length {x.shape[0]}, expected {d}")
    if x.ndim == 2 and x.shape[1] == d:
        return x, False
    raise InvalidParameterError(f"x has shape {x.shape}, expected (n, {d})")


def gaussian_log_pdf(x, mean, cov):
    """Log density of ``N(mean, cov)`` at ``x``.

    ``x`` may be a single point of shape (d,) or a batch of rows (n, d); the
    return value is a float or an (n,) array accordingly.  The quadratic form
    is evaluated through the lower Cholesky factor of ``cov``.

    Raises
    ------
    InvalidParameterError
        If shapes disagree or ``cov`` is not symmetric positive definite;
        the message names the offending eigenvalue.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.shape[0]
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov.reshape(1, 1)
    if cov.shape != (d, d):
        raise InvalidParameterError(f"cov must have shape ({d}, {d}), got {cov.shape}")
    defect = float(np.max(np.abs(cov - cov.T)))
    if defect > SYMMETRY_TOL:
        raise InvalidParameterError(f"cov is not symmetric (max asymmetry {defect:.3e})")
    try:
        L = cholesky(cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        wmin = float(np.linalg.eigvalsh(cov)[0])
        raise InvalidParameterError(
            f"cov is not positive definite: offending eigenvalue {wmin:.6e}"
        ) from None
    rows, single = _as_rows(x, d)
    dev = rows - mean
    z = solve_triangular(L, dev.T, lower=True, check_finite=False)
    quad = np.einsum("ij,ij->j", z, z)
    out = -0.5 * quad - float(np.log(np.diag(L)).sum()) - 0.5 * d * _LOG_2PI
    return float(out[0]) if single else out


def _normal_log_pdf(y, mean, var: float):
    return -0.5 * ((y - mean) ** 2 / var + np.log(2.0 * np.pi * var))


def log_joint_density(G: MixingMeasure, x, y):
    """Log joint density of the mixture at covariate ``x`` and response ``y``.

    Computed as a log-sum-exp over atoms of
    ``log pi_j + log N(x; c_j, Gamma_j) + log N(y; a_j'x + b_j, nu_j)``.
    Accepts a single point (returns float) or batches ``x`` (n, d), ``y`` (n,).
    """
    if G is None or G.k == 0:
        raise InvalidParameterError("empty mixing measure")
    rows, single = _as_rows(x, G.dim)
    ys = np.atleast_1d(np.asarray(y, dtype=float))
    if ys.shape[0] != rows.shape[0]:
        raise InvalidParameterError(
            f"{rows.shape[0]} covariate rows but {ys.shape[0]} responses"
        )
    lp = np.empty((rows.shape[0], G.k))
    for j, comp in enumerate(G.components):
        gate = gaussian_log_pdf(rows, comp.c, comp.Gamma)
        expert = _normal_log_pdf(ys, rows @ comp.a + comp.b, comp.nu)
        lp[:, j] = np.log(G.weights[j]) + gate + expert
    out = logsumexp(lp, axis=1)
    return float(out[0]) if single else out


def to_joint_gaussian(comp: Component) -> JointGaussian:
    """Joint (d+1)-Gaussian law of ``(X, Y)`` under a single atom."""
    ga = comp.Gamma @ comp.a
    d = comp.dim
    Sigma = np.empty((d + 1, d + 1))
    Sigma[:d, :d] = comp.Gamma
    Sigma[:d, d] = ga
    Sigma[d, :d] = ga
    Sigma[d, d] = float(comp.a @ ga) + comp.nu
    psi = np.concatenate([comp.c, [float(comp.a @ comp.c) + comp.b]])
    return JointGaussian(psi, Sigma)


def from_joint_gaussian(jg: JointGaussian, nu_floor: float = NU_FLOOR) -> Component:
    """Invert :func:`to_joint_gaussian`.

    The conditional variance is the Schur complement
    ``Sigma_YY - Sigma_YX Gamma^{-1} Sigma_XY``; when it falls below
    ``nu_floor`` it is clipped up to the floor and a :class:`NuClippedWarning`
    is emitted.
    """
    d = jg.dim
    Gamma = np.array(jg.Sigma[:d, :d])
    sxy = np.array(jg.Sigma[:d, d])
    a = cho_solve(cho_factor(Gamma, lower=True, check_finite=False), sxy)
    nu = float(jg.Sigma[d, d] - sxy @ a)
    if nu < nu_floor:
        warnings.warn(
            f"conditional variance {nu:.6e} below the floor {nu_floor:.1e}; clipped",
            NuClippedWarning,
            stacklevel=2,
        )
        nu = nu_floor
    c = np.array(jg.psi[:d])
    b = float(jg.psi[d] - a @ c)
    return Component(c, Gamma, a, b, nu)


def _num(v: float) -> str:
    # 17 significant digits round-trip any float64 exactly.
    return format(float(v), ".17g")


def _vec(v) -> str:
    return "[" + ", ".join(_num(t) for t in np.asarray(v, dtype=float)) + "]"


def _mat(M) -> str:
    return "[" + ", ".join(_vec(row) for row in np.asarray(M, dtype=float)) + "]"


def measure_to_json(G: MixingMeasure) -> str:
    """Serialize a measure to its canonical JSON document.

    Field order is fixed (dim, atoms; weight, c, gamma, a, b, nu per atom)
    and all numbers carry 17 significant digits, so parsing the text back
    recovers the measure bit for bit.
    """
    atoms = ", ".join(
        '{"weight": %s, "c": %s, "gamma": %s, "a": %s, "b": %s, "nu": %s}'
        % (_num(w), _vec(comp.c), _mat(comp.Gamma), _vec(comp.a), _num(comp.b), _num(comp.nu))
        for w, comp in zip(G.weights, G.components)
    )
    return '{"dim": %d, "atoms": [%s]}' % (G.dim, atoms)


def measure_from_json(text: str) -> MixingMeasure:
    """Parse the JSON document produced by :func:`measure_to_json`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidParameterError(f"measure document is not valid JSON: {exc}") from None
    try:
        atoms = doc["atoms"]
        weights = [entry["weight"] for entry in atoms]
        comps = tuple(
            Component(entry["c"], entry["gamma"], entry["a"], entry["b"], entry["nu"])
            for entry in atoms
        )
        dim = int(doc["dim"])
    except (KeyError, TypeError) as exc:
        raise InvalidParameterError(f"malformed measure document: {exc!r}") from None
    return MixingMeasure(np.asarray(weights, dtype=float), comps, dim=dim)
