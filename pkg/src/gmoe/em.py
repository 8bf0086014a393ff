"""Maximum-likelihood fitting by EM.

EM runs in the joint (d+1)-dimensional Gaussian parameterization, where both
steps are closed form: responsibilities come from the per-atom joint normal
densities, and the update is a responsibility-weighted mean and covariance of
the stacked rows (x_i, y_i).  The E-step works row-wise in the log domain.
Weighted covariances are eigenvalue-floored before use so that over-fitted
components cannot collapse onto single points, and the conditional-variance
floor is applied inside the joint covariance (raising its (y, y) entry), which
matches clipping ``nu`` after conversion back to gate/expert form.

Weights are never projected onto a lower bound during the iteration; if the
smallest final weight drifts below the configured ``beta_floor`` this is
recorded on the result instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .model import (
    LAMBDA_FLOOR,
    NU_FLOOR,
    Component,
    GmoeError,
    InvalidParameterError,
    JointGaussian,
    MixingMeasure,
    from_joint_gaussian,
    measure_to_json,
    to_joint_gaussian,
)
from .sampling import Dataset, make_rng

__all__ = [
    "EmSettings",
    "FitResult",
    "DegenerateComponentError",
    "init_favourable",
    "e_step",
    "m_step",
    "fit",
    "fit_result_to_json",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class DegenerateComponentError(GmoeError, RuntimeError):
    """A component received (numerically) zero total responsibility."""

    def __init__(self, index: int, iteration: int | None = None):
        self.index = index
        self.iteration = iteration
        at = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"component {index} degenerated (zero responsibility){at}")


@dataclass(frozen=True)
class EmSettings:
    """Stopping rule and numerical floors for one EM run.

    The iteration stops when the relative log-likelihood change
    ``|delta| / (|loglik| + 1)`` drops below ``epsilon``, or after
    ``max_iter`` iterations.
    """

    epsilon: float = 1e-5
    max_iter: int = 2000
    lambda_floor: float = LAMBDA_FLOOR
    nu_floor: float = NU_FLOOR
    beta_floor: float = 0.0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise InvalidParameterError("epsilon must be positive")
        if self.max_iter < 1:
            raise InvalidParameterError("max_iter must be at least 1")
        if self.lambda_floor <= 0 or self.nu_floor <= 0:
            raise InvalidParameterError("floors must be positive")
        if self.beta_floor < 0:
            raise InvalidParameterError("beta_floor must be nonnegative")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Output of one EM run."""

    g_hat: MixingMeasure
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    below_beta_floor: bool = False

    @property
    def min_weight(self) -> float:
        return float(self.g_hat.weights.min())


def _floor_spd(M: np.ndarray, floor: float) -> np.ndarray:
    """Clip eigenvalues of a symmetric matrix at `floor`; returns a symmetric matrix."""
    sym = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(sym)
    if w[0] >= floor:
        return sym
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def init_favourable(
    G0: MixingMeasure,
    k: int,
    seed: int,
    perturb_sd: float,
    lambda_floor: float = LAMBDA_FLOOR,
    nu_floor: float = NU_FLOOR,
) -> MixingMeasure:
    """Starting measure built around the true atoms.

    The fitted indices ``{0..k-1}`` are partitioned at random into one
    nonempty group per true atom; each member of group ``t`` takes weight
    ``pi_t / |group t|`` and a copy of atom ``t`` with independent Gaussian
    noise of scale ``perturb_sd`` added to every parameter.  Perturbed gate
    covariances are re-symmetrized and eigenvalue-floored, perturbed expert
    variances are floored.  Deterministic in ``seed``; with ``perturb_sd = 0``
    and ``k`` equal to the number of true atoms the result is exactly ``G0``.

    Stream order: the partition draws come first, then per-atom noise in
    group order (c, Gamma, a, b, nu); no noise is drawn when perturb_sd = 0.
    """
    k0 = G0.k
    if k < k0:
        raise InvalidParameterError(f"k = {k} is smaller than the number of true atoms {k0}")
    if perturb_sd < 0:
        raise InvalidParameterError("perturb_sd must be nonnegative")
    rng = make_rng(seed)
    perm = rng.permutation(k)
    owner = np.empty(k, dtype=int)
    owner[perm[:k0]] = np.arange(k0)
    if k > k0:
        owner[perm[k0:]] = rng.integers(0, k0, size=k - k0)
    d = G0.dim
    weights = []
    comps = []
    for t in range(k0):
        members = np.flatnonzero(owner == t)
        base = G0.components[t]
        share = float(G0.weights[t]) / members.size
        for _ in members:
            if perturb_sd == 0.0:
                comp = base
            else:
                c = base.c + perturb_sd * rng.standard_normal(d)
                W = rng.standard_normal((d, d))
                Gamma = _floor_spd(base.Gamma + perturb_sd * 0.5 * (W + W.T), lambda_floor)
                a = base.a + perturb_sd * rng.standard_normal(d)
                b = base.b + perturb_sd * rng.standard_normal()
                nu = max(base.nu + perturb_sd * rng.standard_normal(), nu_floor)
                comp = Component(c, Gamma, a, b, nu)
            weights.append(share)
            comps.append(comp)
    return MixingMeasure(np.asarray(weights), tuple(comps))


# --------------------------------------------------------------------------
# Array kernels shared by the public steps and the fit loop.  They operate on
# the stacked data matrix z = [x | y] and per-component joint parameters.
# --------------------------------------------------------------------------

def _estep_kernel(z, logw, psis, Sigmas):
    """Responsibilities and log-likelihood from joint-space parameters."""
    n = z.shape[0]
    k = len(logw)
    p = z.shape[1]
    lp = np.empty((n, k))
    for l in range(k):
        L = cholesky(Sigmas[l], lower=True, check_finite=False)
        dev = solve_triangular(L, (z - psis[l]).T, lower=True, check_finite=False)
        quad = np.einsum("ij,ij->j", dev, dev)
        lp[:, l] = logw[l] - 0.5 * quad - np.log(np.diag(L)).sum() - 0.5 * p * _LOG_2PI
    norm = logsumexp(lp, axis=1)
    return np.exp(lp - norm[:, None]), float(norm.sum())


def _mstep_kernel(resp, z, lambda_floor, nu_floor):
    """Weighted joint-space update; covariances floored, Schur gap enforced."""
    n, k = resp.shape
    totals = resp.sum(axis=0)
    floor = 10.0 * np.finfo(float).eps * n
    if np.any(totals < floor):
        raise DegenerateComponentError(int(np.argmin(totals)))
    p = z.shape[1]
    psis = np.empty((k, p))
    Sigmas = np.empty((k, p, p))
    for l in range(k):
        r = resp[:, l]
        psi = r @ z / totals[l]
        dev = z - psi
        Sigma = (r[:, None] * dev).T @ dev / totals[l]
        Sigma = _floor_spd(Sigma, lambda_floor)
        # Clipping nu after conversion equals raising the (y, y) entry so the
        # Schur complement meets the floor.
        schur = _schur_gap(Sigma)
        if schur < nu_floor:
            Sigma = Sigma.copy()
            Sigma[-1, -1] += nu_floor - schur
        psis[l] = psi
        Sigmas[l] = Sigma
    return totals / totals.sum(), psis, Sigmas


def _schur_gap(Sigma: np.ndarray) -> float:
    d = Sigma.shape[0] - 1
    L = cholesky(Sigma[:d, :d], lower=True, check_finite=False)
    half = solve_triangular(L, Sigma[:d, d], lower=True, check_finite=False)
    return float(Sigma[d, d] - half @ half)


def _measure_joint_arrays(G: MixingMeasure):
    logw = np.log(G.weights)
    p = G.dim + 1
    psis = np.empty((G.k, p))
    Sigmas = np.empty((G.k, p, p))
    for l, comp in enumerate(G.components):
        jg = to_joint_gaussian(comp)
        psis[l] = jg.psi
        Sigmas[l] = jg.Sigma
    return logw, psis, Sigmas


def _measure_from_joint_arrays(weights, psis, Sigmas, nu_floor) -> MixingMeasure:
    comps = tuple(
        from_joint_gaussian(JointGaussian(psi, Sigma), nu_floor=nu_floor)
        for psi, Sigma in zip(psis, Sigmas)
    )
    return MixingMeasure(weights, comps)


def e_step(G: MixingMeasure, data: Dataset) -> tuple[np.ndarray, float]:
    """Posterior component responsibilities and the log-likelihood.

    Row ``i`` of the returned matrix is the posterior over atoms given
    ``(x_i, y_i)`` under the joint density; rows sum to one.  The second
    value is ``sum_i log p_G(x_i, y_i)``.
    """
    if data.d != G.dim:
        raise InvalidParameterError(f"data dimension {data.d} != measure dimension {G.dim}")
    z = np.column_stack([data.x, data.y])
    return _estep_kernel(z, *_measure_joint_arrays(G))


def m_step(resp: np.ndarray, data: Dataset, settings: EmSettings = EmSettings()) -> MixingMeasure:
    """Weighted maximum-likelihood update from responsibilities.

    Per component: the weight is the mean responsibility, the joint mean and
    covariance are responsibility-weighted moments of the stacked rows
    ``(x_i, y_i)``; the covariance is eigenvalue-floored and converted back
    to gate/expert form.

    Raises
    ------
    DegenerateComponentError
        If some column of ``resp`` has total mass below ``10 eps n``.
    """
    resp = np.asarray(resp, dtype=float)
    if resp.ndim != 2 or resp.shape[0] != data.n:
        raise InvalidParameterError(f"resp must have shape (n, k) with n = {data.n}")
    if resp.shape[0] and np.max(np.abs(resp.sum(axis=1) - 1.0)) > 1e-8:
        raise InvalidParameterError("responsibility rows must sum to 1")
    z = np.column_stack([data.x, data.y])
    weights, psis, Sigmas = _mstep_kernel(resp, z, settings.lambda_floor, settings.nu_floor)
    return _measure_from_joint_arrays(weights, psis, Sigmas, settings.nu_floor)


def fit(
    data: Dataset,
    k: int,
    init: MixingMeasure,
    settings: EmSettings = EmSettings(),
) -> FitResult:
    """Run EM from ``init`` until the stopping rule fires or ``max_iter`` is hit.

    ``loglik_trace[0]`` is the log-likelihood of the initializer and each
    subsequent entry follows one EM iteration; the trace is non-decreasing up
    to floating-point noise.  ``converged`` is True exactly when the run
    stopped before exhausting the iteration cap.
    """
    if init.k != k:
        raise InvalidParameterError(f"init has {init.k} atoms, expected k = {k}")
    if data.n == 0:
        raise InvalidParameterError("cannot fit an empty dataset")
    if data.d != init.dim:
        raise InvalidParameterError(f"data dimension {data.d} != init dimension {init.dim}")
    z = np.column_stack([data.x, data.y])
    logw, psis, Sigmas = _measure_joint_arrays(init)
    weights = np.array(init.weights)
    resp, ll = _estep_kernel(z, logw, psis, Sigmas)
    trace = [ll]
    iterations = 0
    for t in range(1, settings.max_iter + 1):
        try:
            weights, psis, Sigmas = _mstep_kernel(
                resp, z, settings.lambda_floor, settings.nu_floor
            )
        except DegenerateComponentError as exc:
            raise DegenerateComponentError(exc.index, iteration=t) from None
        resp, ll_new = _estep_kernel(z, np.log(weights), psis, Sigmas)
        trace.append(ll_new)
        iterations = t
        if abs(ll_new - ll) / (abs(ll_new) + 1.0) < settings.epsilon:
            break
        ll = ll_new
    g_hat = _measure_from_joint_arrays(weights, psis, Sigmas, settings.nu_floor)
    return FitResult(
        g_hat=g_hat,
        loglik_trace=np.asarray(trace),
        iterations=iterations,
        converged=iterations < settings.max_iter,
        below_beta_floor=bool(g_hat.weights.min() < settings.beta_floor),
    )


def fit_result_to_json(result: FitResult) -> str:
    """JSON document with the fitted measure, trace, and run flags."""
    import json

    doc = {
        "measure": json.loads(measure_to_json(result.g_hat)),
        "loglik_trace": [float(v) for v in result.loglik_trace],
        "iterations": result.iterations,
        "converged": result.converged,
        "min_weight": result.min_weight,
        "below_beta_floor": result.below_beta_floor,
    }
    return json.dumps(doc, indent=2) + "\n"
