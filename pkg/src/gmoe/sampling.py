"""Reproducible hierarchical sampling from a mixing measure.

Seeds are expanded through :class:`numpy.random.SeedSequence` and fed to the
Philox counter-based bit generator, so a (base seed, derivation path) pair
names the same stream on every machine and under any scheduling.  Sweep code
derives per-task seeds as ``derive_seed(base_seed, model_code, n_index,
rep_index, stream)`` with stream 0 for sampling and 1 for initialization.

:func:`sample` consumes its stream in a fixed, documented order: component
labels first, then the standard normals behind X (one d-block per row), then
the standard normals behind Y.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import InvalidParameterError, MixingMeasure

__all__ = [
    "Dataset",
    "seed_sequence",
    "make_rng",
    "derive_seed",
    "sample",
    "sample_labels",
    "dataset_to_csv",
    "dataset_sidecar",
    "dataset_from_csv",
]


def seed_sequence(base_seed: int, *path: int) -> np.random.SeedSequence:
    """Seed sequence for `base_seed` refined by an integer derivation path."""
    return np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(p) for p in path))


def make_rng(base_seed: int, *path: int) -> np.random.Generator:
    """Philox generator for the given seed and derivation path."""
    return np.random.Generator(np.random.Philox(seed_sequence(base_seed, *path)))


def derive_seed(base_seed: int, *path: int) -> int:
    """Collapse (base_seed, path) to a single 64-bit seed."""
    return int(seed_sequence(base_seed, *path).generate_state(1, np.uint64)[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    """I.i.d. draws (x_i, y_i) with the seed that produced them."""

    x: np.ndarray
    y: np.ndarray
    seed: int
    source_label: str = ""

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2:
            raise InvalidParameterError(f"x must be 2-d, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InvalidParameterError(
                f"y must have one entry per row of x ({x.shape[0]}), got shape {y.shape}"
            )
        x = np.array(x)
        y = np.array(y)
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def _draw_labels(rng: np.random.Generator, G: MixingMeasure, n: int) -> np.ndarray:
    return rng.choice(G.k, size=n, p=G.weights)


def sample(G: MixingMeasure, n: int, seed: int, source_label: str = "") -> Dataset:
    """Draw ``n`` i.i.d. pairs from the mixture.

    Per row: a component label Z from the weights, then
    ``X = c_Z + L_Z eps`` with ``L_Z`` the lower Cholesky factor of
    ``Gamma_Z``, then ``Y = a_Z'X + b_Z + sqrt(nu_Z) eta``.  Deterministic
    given ``(G, n, seed)``.
    """
    if n < 0:
        raise InvalidParameterError("n must be nonnegative")
    rng = make_rng(seed)
    labels = _draw_labels(rng, G, n)
    xnoise = rng.standard_normal((n, G.dim))
    ynoise = rng.standard_normal(n)
    x = np.empty((n, G.dim))
    y = np.empty(n)
    for j, comp in enumerate(G.components):
        idx = np.flatnonzero(labels == j)
        if idx.size == 0:
            continue
        L = np.linalg.cholesky(comp.Gamma)
        x[idx] = comp.c + xnoise[idx] @ L.T
        y[idx] = x[idx] @ comp.a + comp.b + np.sqrt(comp.nu) * ynoise[idx]
    return Dataset(x, y, seed=int(seed), source_label=source_label)


def sample_labels(G: MixingMeasure, n: int, seed: int) -> np.ndarray:
    """Replay only the component-label block of :func:`sample`'s stream."""
    return _draw_labels(make_rng(seed), G, n)


def dataset_to_csv(ds: Dataset) -> str:
    """Render as CSV with header ``x1..xd,y``; floats use shortest round-trip form."""
    header = ",".join([f"x{i + 1}" for i in range(ds.d)] + ["y"])
    lines = [header]
    for row, yv in zip(ds.x, ds.y):
        lines.append(",".join([repr(float(v)) for v in row] + [repr(float(yv))]))
    return "\n".join(lines) + "\n"


def dataset_sidecar(ds: Dataset) -> dict:
    """Sidecar metadata for a serialized dataset."""
    return {"seed": ds.seed, "source_label": ds.source_label, "n": ds.n, "d": ds.d}


def dataset_from_csv(csv_text: str, sidecar: dict) -> Dataset:
    """Parse :func:`dataset_to_csv` output plus its sidecar back to a Dataset."""
    lines = [ln for ln in csv_text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidParameterError("dataset CSV is empty (header expected)")
    d = int(sidecar["d"])
    expected = ",".join([f"x{i + 1}" for i in range(d)] + ["y"])
    if lines[0] != expected:
        raise InvalidParameterError(f"unexpected CSV header {lines[0]!r}")
    body = np.array(
        [[float(tok) for tok in ln.split(",")] for ln in lines[1:]], dtype=float
    ).reshape(len(lines) - 1, d + 1)
    if body.shape[0] != int(sidecar["n"]):
        raise InvalidParameterError(
            f"CSV has {body.shape[0]} rows but sidecar says n = {sidecar['n']}"
        )
    return Dataset(
        body[:, :d],
        body[:, d],
        seed=int(sidecar["seed"]),
        source_label=str(sidecar.get("source_label", "")),
    )


def sidecar_to_json(sidecar: dict) -> str:
    return json.dumps(sidecar, indent=2) + "\n"
