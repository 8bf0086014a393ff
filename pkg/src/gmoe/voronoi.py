"""Voronoi cells over atom parameter space and the two cell-size-aware losses.

Each fitted atom is assigned to the nearest true atom under the Euclidean
norm of the stacked vector (c, vec Gamma, a, b, nu); ties go to the smallest
true index.  A true atom matched by exactly one fitted atom contributes
first-power parameter gaps to the loss, while an atom matched by m > 1 atoms
contributes gaps raised to powers that grow with the solvability order of
the associated polynomial system: order 4 for m = 2 and 6 for m = 3, with no
order known for m >= 4 (only a lower bound of 7), in which case the lookups
raise rather than guess.  Both losses add the absolute gap between each true
weight and the total fitted weight of its cell; empty cells contribute only
that term.

``loss_dtilde`` differs from ``loss_dbar`` only on over-fitted cells whose
true gate location is the zero vector: there the slope-gap exponent is tied
to the cell order instead of staying at 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import Component, GmoeError, InvalidParameterError, MixingMeasure

__all__ = [
    "TYPE_I",
    "TYPE_II",
    "UnsupportedCellOrderError",
    "VoronoiAssignment",
    "KappaTuple",
    "SettingClass",
    "assign_cells",
    "rbar",
    "rtilde",
    "kappa_K",
    "classify_setting",
    "loss_dbar",
    "loss_dtilde",
]

TYPE_I = "type-i"
TYPE_II = "type-ii"

_ORDER_TABLE = {2: 4, 3: 6}
#: Known lower bound on the solvability order for cells of size >= 4.
ORDER_LOWER_BOUND_M4 = 7


class UnsupportedCellOrderError(GmoeError, ValueError):
    """No solvability order is known for this cell size."""

    def __init__(self, m: int, family: str = "rbar"):
        self.m = m
        self.family = family
        self.lower_bound = ORDER_LOWER_BOUND_M4 if family == "rbar" else None
        if family == "rbar":
            detail = f"only the lower bound >= {ORDER_LOWER_BOUND_M4} is known"
        else:
            detail = "only that it does not exceed the rbar order is known"
        super().__init__(
            f"no {family} order is available for cells of size m = {m}; {detail}. "
            "Supply an asserted order via r_override to proceed."
        )


@dataclass(frozen=True, eq=False)
class VoronoiAssignment:
    """Partition of fitted-atom indices into one cell per true atom."""

    cells: tuple[tuple[int, ...], ...]
    distances: np.ndarray  # (k, k0) stacked-parameter distances

    @property
    def cell_sizes(self) -> tuple[int, ...]:
        return tuple(len(cell) for cell in self.cells)


@dataclass(frozen=True)
class KappaTuple:
    """Exponents applied to (|dc|, |dGamma|, |da|, |db|, |dnu|)."""

    k1: float
    k2: float
    k3: float
    k4: float
    k5: float

    def __post_init__(self) -> None:
        if min(self.k1, self.k2, self.k3, self.k4, self.k5) <= 0:
            raise InvalidParameterError("all exponents must be positive")


@dataclass(frozen=True)
class SettingClass:
    """Which loss regime a true measure falls in.

    ``kind`` is TYPE_II exactly when at least one true gate location is
    (numerically) zero; ``zero_indices`` lists those atoms and ``ktilde``
    counts them.
    """

    kind: str
    ktilde: int
    zero_indices: frozenset[int]

    def __post_init__(self) -> None:
        if self.kind not in (TYPE_I, TYPE_II):
            raise InvalidParameterError(f"unknown setting kind {self.kind!r}")
        if (self.kind == TYPE_I) != (self.ktilde == 0):
            raise InvalidParameterError("kind and ktilde disagree")
        if len(self.zero_indices) != self.ktilde:
            raise InvalidParameterError("zero_indices and ktilde disagree")


def assign_cells(G: MixingMeasure, G0: MixingMeasure) -> VoronoiAssignment:
    """Assign every fitted atom to its nearest true atom.

    Ties are broken toward the smallest true index, which makes the partition
    deterministic (ties are a measure-zero event for fitted measures).
    """
    if G.dim != G0.dim:
        raise InvalidParameterError("measures live in different dimensions")
    theta = np.stack([comp.stack() for comp in G.components])
    theta0 = np.stack([comp.stack() for comp in G0.components])
    distances = np.linalg.norm(theta[:, None, :] - theta0[None, :, :], axis=2)
    nearest = np.argmin(distances, axis=1)
    cells = tuple(
        tuple(int(i) for i in np.flatnonzero(nearest == j)) for j in range(G0.k)
    )
    return VoronoiAssignment(cells=cells, distances=distances)


def rbar(m: int, r_override: Mapping[int, int] | None = None) -> int:
    """Solvability order of the two-variable factorial system for cell size m.

    Known values: 4 at m = 2 and 6 at m = 3.  For m >= 4 only a lower bound
    (7) is known and the call raises unless ``r_override`` asserts a value.
    """
    if m < 2:
        raise InvalidParameterError(f"cell order lookups need m >= 2, got {m}")
    if r_override and m in r_override:
        return int(r_override[m])
    if m in _ORDER_TABLE:
        return _ORDER_TABLE[m]
    raise UnsupportedCellOrderError(m, family="rbar")


def rtilde(m: int, r_override: Mapping[int, int] | None = None) -> int:
    """Solvability order of the five-variable factorial system for cell size m.

    Never exceeds :func:`rbar`; equality holds at the known values
    (4 at m = 2, 6 at m = 3).  Raises for m >= 4 unless overridden.
    """
    if m < 2:
        raise InvalidParameterError(f"cell order lookups need m >= 2, got {m}")
    if r_override and m in r_override:
        return int(r_override[m])
    if m in _ORDER_TABLE:
        return _ORDER_TABLE[m]
    raise UnsupportedCellOrderError(m, family="rtilde")


def kappa_K(comp_i: Component, comp0_j: Component, kap: KappaTuple) -> float:
    """Sum of parameter gaps raised to the given exponents.

    ``|dc|`` and ``|da|`` are Euclidean norms, ``|dGamma|`` is Frobenius.
    Zero exactly when the components coincide.
    """
    if comp_i.dim != comp0_j.dim:
        raise InvalidParameterError("components live in different dimensions")
    dc = float(np.linalg.norm(comp_i.c - comp0_j.c))
    dg = float(np.linalg.norm(comp_i.Gamma - comp0_j.Gamma))
    da = float(np.linalg.norm(comp_i.a - comp0_j.a))
    db = abs(comp_i.b - comp0_j.b)
    dn = abs(comp_i.nu - comp0_j.nu)
    return dc**kap.k1 + dg**kap.k2 + da**kap.k3 + db**kap.k4 + dn**kap.k5


def classify_setting(G0: MixingMeasure, zero_tol: float = 0.0) -> SettingClass:
    """Detect whether any true gate location is zero (within ``zero_tol``)."""
    zero = frozenset(
        j for j, comp in enumerate(G0.components)
        if float(np.linalg.norm(comp.c)) <= zero_tol
    )
    kind = TYPE_II if zero else TYPE_I
    return SettingClass(kind=kind, ktilde=len(zero), zero_indices=zero)


_EXACT_KAPPA = KappaTuple(1, 1, 1, 1, 1)


def _require_distinct(G0: MixingMeasure) -> None:
    theta0 = np.stack([comp.stack() for comp in G0.components])
    for j in range(G0.k):
        for l in range(j + 1, G0.k):
            if np.array_equal(theta0[j], theta0[l]):
                raise InvalidParameterError(f"true atoms {j} and {l} coincide")


def _loss(
    G: MixingMeasure,
    G0: MixingMeasure,
    overfit_kappa,
    r_override: Mapping[int, int] | None,
    assignment: VoronoiAssignment | None,
) -> float:
    _require_distinct(G0)
    asg = assignment if assignment is not None else assign_cells(G, G0)
    total = 0.0
    for j, cell in enumerate(asg.cells):
        if len(cell) == 1:
            kap = _EXACT_KAPPA
        elif len(cell) > 1:
            kap = overfit_kappa(j, len(cell))
        else:
            kap = None
        mass = 0.0
        for i in cell:
            mass += float(G.weights[i])
            total += float(G.weights[i]) * kappa_K(G.components[i], G0.components[j], kap)
        total += abs(mass - float(G0.weights[j]))
    return total


def loss_dbar(
    G: MixingMeasure,
    G0: MixingMeasure,
    r_override: Mapping[int, int] | None = None,
    assignment: VoronoiAssignment | None = None,
) -> float:
    """Voronoi loss for measures whose true gate locations are all nonzero.

    Over-fitted cells of size m use exponents (r, r/2, 2, r, r/2) with
    r = rbar(m); exact-fitted cells use all-ones exponents.  Nonnegative and
    zero exactly when the measures coincide up to atom order.
    """

    def overfit(_j: int, m: int) -> KappaTuple:
        r = rbar(m, r_override)
        return KappaTuple(r, r / 2, 2, r, r / 2)

    return _loss(G, G0, overfit, r_override, assignment)


def loss_dtilde(
    G: MixingMeasure,
    G0: MixingMeasure,
    setting: SettingClass,
    r_override: Mapping[int, int] | None = None,
    assignment: VoronoiAssignment | None = None,
) -> float:
    """Voronoi loss honouring zero gate locations.

    Over-fitted cells generated by a zero-location true atom use exponents
    (r, r/2, r/2, r, r/2) with r = rtilde(m); other over-fitted cells use the
    :func:`loss_dbar` exponents, so the two losses coincide whenever
    ``setting.ktilde == 0``.  Cell membership in the zero group follows
    ``setting.zero_indices``, which is equivalent to reordering the true
    atoms so the zero-location ones come first.
    """

    def overfit(j: int, m: int) -> KappaTuple:
        if j in setting.zero_indices:
            r = rtilde(m, r_override)
            return KappaTuple(r, r / 2, r / 2, r, r / 2)
        r = rbar(m, r_override)
        return KappaTuple(r, r / 2, 2, r, r / 2)

    if setting.zero_indices and max(setting.zero_indices) >= G0.k:
        raise InvalidParameterError("setting refers to atoms outside the true measure")
    return _loss(G, G0, overfit, r_override, assignment)
