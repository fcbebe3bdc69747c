"""Ordering curve ensembles and building envelope bands.

Curves are ranked either by modified band depth (larger = more central,
computed with the rank-based fast algorithm) or by L2 distance to the zero
curve (smaller = more central). The central envelope of the most central
``floor(B (1 - alpha))`` curves gives simultaneous band limits; coverage
metrics compare bands against a known truth curve.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exceptions import BasisMismatchError, SelectionError


@dataclass(frozen=True)
class CurveEnsemble:
    """B curves sampled on a shared grid (values shape B x M)."""

    values: np.ndarray
    grid: np.ndarray

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        grid = np.asarray(self.grid, dtype=float)
        if values.shape[1] != grid.size or grid.size < 2:
            raise ValueError(f"values {values.shape} incompatible with grid of size {grid.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("ensemble values must be finite")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "grid", grid)

    @property
    def n_curves(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PredictionBand:
    """Lower/upper envelope curves around a prediction, on a common grid."""

    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    prediction: np.ndarray = None

    def __post_init__(self):
        for name in ("grid", "lower", "upper", "prediction"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))
        if self.lower.shape != self.grid.shape or self.upper.shape != self.grid.shape:
            raise ValueError("band curves must match the grid length")
        if np.any(self.lower > self.upper):
            raise ValueError("band must satisfy lower <= upper pointwise")


def band_depth(ensemble: CurveEnsemble, j: int) -> float:
    """Band depth of curve j: fraction of curve pairs strictly enclosing it.

    A pair counts only when the graph of curve j stays strictly between
    the pair's pointwise minimum and maximum over the whole domain, so a
    curve lying on a band edge (in particular any pair containing the
    curve itself) does not count.
    """
    v = ensemble.values
    n = ensemble.n_curves
    if n < 3:
        raise ValueError("band depth needs at least 3 curves")
    y = v[j]
    count = 0
    for i1, i2 in combinations(range(n), 2):
        lo = np.minimum(v[i1], v[i2])
        hi = np.maximum(v[i1], v[i2])
        if np.all(lo < y) and np.all(y < hi):
            count += 1
    return count / (n * (n - 1) / 2)


def modified_band_depth(ensemble: CurveEnsemble) -> np.ndarray:
    """Modified band depth of every curve, by the rank-based fast algorithm.

    Equals the definitional double sum over pairs ``i1 < i2`` (non-strict
    band containment, pairs including the evaluated curve counting in
    full) of the fraction of grid points where the curve lies inside the
    pair's band. Ties are handled exactly: at a grid point with ``L``
    values below, ``E`` other values equal and ``U`` values above, the
    number of containing pairs is ``L*U + E*(L+U) + C(E,2) + (n-1)``.
    """
    v = ensemble.values
    n, m = v.shape
    if n < 3:
        raise ValueError("modified band depth needs at least 3 curves")
    total = np.zeros(n)
    for col in v.T:
        order = np.sort(col)
        below = np.searchsorted(order, col, side="left")
        below_or_eq = np.searchsorted(order, col, side="right")
        eq = below_or_eq - below - 1  # other curves tied with this one
        above = n - below_or_eq
        total += below * above + eq * (below + above) + eq * (eq - 1) / 2.0 + (n - 1)
    return total / (m * n * (n - 1) / 2.0)


def l2_order(ensemble: CurveEnsemble) -> np.ndarray:
    """L2 distance of every curve to the zero curve (trapezoidal rule)."""
    return np.sqrt(np.trapezoid(ensemble.values**2, ensemble.grid, axis=1))


def _central_indices(ensemble: CurveEnsemble, alpha: float, method: str) -> np.ndarray:
    if method not in ("mbd", "l2"):
        raise ValueError(f"method must be 'mbd' or 'l2', got {method!r}")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    n_keep = int(np.floor(ensemble.n_curves * (1.0 - alpha)))
    if n_keep < 1:
        raise SelectionError(f"central set is empty at alpha={alpha} with B={ensemble.n_curves}")
    if method == "mbd":
        key = -modified_band_depth(ensemble)
    else:
        key = l2_order(ensemble)
    # stable sort: ties keep the lower replicate index, deterministically
    return np.argsort(key, kind="stable")[:n_keep]


def central_envelope(ensemble: CurveEnsemble, alpha: float, method: str = "mbd"):
    """Pointwise min/max of the most central ``floor(B (1-alpha))`` curves."""
    selected = ensemble.values[_central_indices(ensemble, alpha, method)]
    return selected.min(axis=0), selected.max(axis=0)


def domain_coverage(band: PredictionBand, truth) -> float:
    """Fraction of grid points where the truth lies inside the band."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape != band.grid.shape:
        raise BasisMismatchError(
            f"truth curve has {truth.shape} values for a grid of {band.grid.shape}"
        )
    inside = (band.lower <= truth) & (truth <= band.upper)
    return float(np.mean(inside))


def functional_coverage(runs, threshold: float = 1.0) -> float:
    """Percentage of (band, truth) runs with domain coverage >= threshold."""
    runs = list(runs)
    if not runs:
        raise ValueError("need at least one run")
    hits = [domain_coverage(band, truth) >= threshold for band, truth in runs]
    return 100.0 * float(np.mean(hits))


@dataclass(frozen=True)
class BandWidth:
    """Width curve of a band with its mean/max summary."""

    width: np.ndarray
    mean: float
    max: float


def band_width(band: PredictionBand) -> BandWidth:
    """Pointwise band width and summary statistics over the grid."""
    w = band.upper - band.lower
    return BandWidth(w, float(np.mean(w)), float(np.max(w)))
