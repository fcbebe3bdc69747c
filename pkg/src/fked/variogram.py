"""Trace-semivariogram estimation and parametric variogram models.

The empirical trace-semivariogram of a functional residual field averages
squared L2 distances between curve pairs per distance class; with curves on
a common B-spline basis each integral is a Gram-matrix quadratic form, so
no numerical quadrature is involved.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from .basis import gram_matrix
from .curves import CurveSet
from .exceptions import ConditioningError, DomainError, VariogramFitError

FAMILIES = ("exponential", "gaussian", "spherical")

DEFAULT_N_BINS = 15
DEFAULT_MAX_DIST_FRACTION = 0.5

_JITTER_START = 1e-10
_JITTER_DOUBLINGS = 8


@dataclass(frozen=True)
class VariogramConfig:
    """Options shared by every routine that estimates and fits variograms."""

    families: tuple = FAMILIES
    fix_nugget_zero: bool = True
    weighted: bool = False
    n_bins: int = DEFAULT_N_BINS
    max_dist_fraction: float = DEFAULT_MAX_DIST_FRACTION

    def to_dict(self) -> dict:
        return {
            "families": list(self.families),
            "fix_nugget_zero": self.fix_nugget_zero,
            "weighted": self.weighted,
            "n_bins": self.n_bins,
            "max_dist_fraction": self.max_dist_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariogramConfig":
        return cls(
            families=tuple(d.get("families", FAMILIES)),
            fix_nugget_zero=bool(d.get("fix_nugget_zero", True)),
            weighted=bool(d.get("weighted", False)),
            n_bins=int(d.get("n_bins", DEFAULT_N_BINS)),
            max_dist_fraction=float(d.get("max_dist_fraction", DEFAULT_MAX_DIST_FRACTION)),
        )


@dataclass(frozen=True)
class VariogramModel:
    """Parametric semivariogram: ``gamma(h) = nugget*1(h>0) + scale*shape(h/range)``."""

    family: str
    nugget: float
    scale: float
    range: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.nugget < 0 or self.scale <= 0 or self.range <= 0:
            raise ValueError("require nugget >= 0, scale > 0, range > 0")

    @property
    def sill(self) -> float:
        return self.nugget + self.scale

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "nugget": self.nugget,
            "scale": self.scale,
            "range": self.range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariogramModel":
        return cls(d["family"], float(d["nugget"]), float(d["scale"]), float(d["range"]))


@dataclass(frozen=True)
class EmpiricalVariogram:
    """Binned trace-semivariogram estimate.

    ``lags`` are bin centers (strictly increasing), ``gamma`` the estimated
    semivariance per bin and ``counts`` the number of site pairs per bin;
    empty bins have been dropped.
    """

    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    max_dist: float

    def __post_init__(self):
        object.__setattr__(self, "lags", np.asarray(self.lags, dtype=float))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=int))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"h": self.lags, "gamma": self.gamma, "count": self.counts})

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def _shape(family: str, h: np.ndarray, rng: float) -> np.ndarray:
    """Unit-scale, nugget-free variogram shape."""
    u = h / rng
    if family == "exponential":
        return 1.0 - np.exp(-u)
    if family == "gaussian":
        return 1.0 - np.exp(-(u**2))
    if family == "spherical":
        return np.where(u < 1.0, 1.5 * u - 0.5 * u**3, 1.0)
    raise ValueError(f"unknown family {family!r}")


def variogram_eval(model: VariogramModel, h):
    """Evaluate ``gamma(h)``; ``gamma(0) = 0`` exactly."""
    h_arr = np.asarray(h, dtype=float)
    if np.any(h_arr < 0):
        raise DomainError("distances must be nonnegative")
    out = model.scale * _shape(model.family, h_arr, model.range)
    out = out + model.nugget * (h_arr > 0)
    return out if np.ndim(h) else float(out)


def covariance_eval(model: VariogramModel, h):
    """Covariance ``C(h) = sill - gamma(h)``; ``C(0)`` equals the sill."""
    return model.sill - variogram_eval(model, h)


class TraceVariogramBinning:
    """Precomputed pair indices and bin assignment for a fixed site layout.

    Building this once lets the bootstrap re-estimate the empirical
    trace-semivariogram for thousands of residual replicates without
    re-deriving distances or bins.
    """

    def __init__(self, coords, n_bins=DEFAULT_N_BINS, max_dist_fraction=DEFAULT_MAX_DIST_FRACTION):
        coords = np.asarray(coords, dtype=float)
        n = coords.shape[0]
        if n < 2:
            raise ValueError("need at least 2 sites")
        ii, jj = np.triu_indices(n, 1)
        dist = np.linalg.norm(coords[ii] - coords[jj], axis=1)
        self.max_dist = float(max_dist_fraction * dist.max())
        keep = dist <= self.max_dist
        if not keep.any():
            # cutoff would discard every pair (e.g. two sites): keep them all
            self.max_dist = float(dist.max())
            keep = np.ones_like(keep)
        self.i, self.j, dist = ii[keep], jj[keep], dist[keep]
        if np.ptp(dist) == 0:
            warnings.warn("all retained pairwise distances identical; single-bin variogram")
            self.edges = np.array([0.0, self.max_dist])
        else:
            self.edges = np.linspace(0.0, self.max_dist, n_bins + 1)
        self.bin_of_pair = np.clip(
            np.searchsorted(self.edges, dist, side="right") - 1, 0, len(self.edges) - 2
        )
        self.n_bins = len(self.edges) - 1
        self.counts = np.bincount(self.bin_of_pair, minlength=self.n_bins)
        self.centers = 0.5 * (self.edges[:-1] + self.edges[1:])

    def estimate(self, coeffs, gram) -> EmpiricalVariogram:
        """Empirical trace-semivariogram of coefficient rows under a Gram matrix."""
        diff = coeffs[self.i] - coeffs[self.j]
        sq = np.einsum("ij,jk,ik->i", diff, gram, diff)
        sums = np.bincount(self.bin_of_pair, weights=sq, minlength=self.n_bins)
        nonempty = self.counts > 0
        gamma = sums[nonempty] / (2.0 * self.counts[nonempty])
        return EmpiricalVariogram(
            self.centers[nonempty], gamma, self.counts[nonempty], self.max_dist
        )


def empirical_trace_semivariogram(
    residuals: CurveSet,
    n_bins: int = DEFAULT_N_BINS,
    max_dist_fraction: float = DEFAULT_MAX_DIST_FRACTION,
) -> EmpiricalVariogram:
    """Binned trace-semivariogram of a residual curve set.

    Uses equal-width distance classes up to ``max_dist_fraction`` times the
    maximum pairwise distance; bins without pairs are dropped.
    """
    binning = TraceVariogramBinning(residuals.coords, n_bins, max_dist_fraction)
    return binning.estimate(residuals.coeffs, gram_matrix(residuals.basis))


_SCAN_POINTS = 40


def _profile_fit(emp: EmpiricalVariogram, family, rng, fix_nugget_zero, weights):
    """Optimal (nugget, scale, sse) for a fixed range, linear in the data."""
    g = _shape(family, emp.lags, rng)
    if fix_nugget_zero:
        denom = float(weights @ (g * g))
        if denom <= 0:
            return None
        scale = float(weights @ (g * emp.gamma) / denom)
        nugget = 0.0
    else:
        # weighted 2 x 2 normal equations with an active-set nonnegativity step
        sw = weights
        a11, a12, a22 = float(sw.sum()), float(sw @ g), float(sw @ (g * g))
        b1, b2 = float(sw @ emp.gamma), float(sw @ (g * emp.gamma))
        det = a11 * a22 - a12 * a12
        if det > 1e-14 * max(a11 * a22, 1e-300):
            nugget = (a22 * b1 - a12 * b2) / det
            scale = (a11 * b2 - a12 * b1) / det
        else:
            nugget, scale = -1.0, 0.0
        if nugget < 0:
            nugget = 0.0
            scale = b2 / a22 if a22 > 0 else 0.0
    if scale <= 0:
        return None
    resid = emp.gamma - nugget - scale * g
    return nugget, scale, float(weights @ (resid * resid))


def fit_variogram(
    emp: EmpiricalVariogram,
    families=FAMILIES,
    fix_nugget_zero: bool = True,
    weighted: bool = False,
) -> VariogramModel:
    """Fit parametric models by least squares and keep the smallest-SSE family.

    The nugget and scale are profiled out analytically for each trial range,
    so only the range needs searching: a dense log-spaced scan spanning the
    distance domain followed by one bounded refinement around the best scan
    point. ``weighted=True`` weights squared errors by pair counts; the
    default is plain SSE.
    """
    families = tuple(families)
    if any(f not in FAMILIES for f in families):
        raise ValueError(f"families must be drawn from {FAMILIES}")
    if emp.lags.size < 3:
        raise VariogramFitError(f"need >= 3 bins to fit a variogram, have {emp.lags.size}")
    weights = emp.counts.astype(float) if weighted else np.ones_like(emp.gamma)

    h_max = float(emp.lags.max())
    grid = np.geomspace(1e-3 * h_max, 10.0 * h_max, _SCAN_POINTS)
    best = None  # (sse, family, nugget, scale, rng)
    failures = {}
    for family in families:

        def sse_of(rng, family=family):
            prof = _profile_fit(emp, family, rng, fix_nugget_zero, weights)
            return np.inf if prof is None else prof[2]

        if fix_nugget_zero:
            # vectorized scan: optimal scale per trial range in closed form
            G = _shape(family, emp.lags[None, :], grid[:, None])
            num = G @ (weights * emp.gamma)
            den = (G * G) @ weights
            ok = (num > 0) & (den > 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                scan = np.where(ok, weights @ emp.gamma**2 - num**2 / den, np.inf)
        else:
            scan = np.array([sse_of(rng) for rng in grid])
        i = int(np.argmin(scan))
        if not np.isfinite(scan[i]):
            failures[family] = "no admissible parameters (scale must be > 0)"
            continue
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = minimize_scalar(sse_of, bounds=(lo, hi), method="bounded")
        fam_rng = float(res.x)
        if sse_of(grid[i]) < sse_of(fam_rng):
            fam_rng = float(grid[i])
        prof = _profile_fit(emp, family, fam_rng, fix_nugget_zero, weights)
        if prof is None:
            failures[family] = "degenerate profile at optimum"
            continue
        nugget, scale, sse = prof
        if best is None or sse < best[0]:
            best = (sse, family, nugget, scale, fam_rng)
    if best is None:
        raise VariogramFitError(f"variogram fitting failed for every family: {failures}")
    _, family, nugget, scale, rng = best
    return VariogramModel(family, nugget, scale, rng)


def cholesky_with_jitter(mat: np.ndarray, scale: float):
    """Lower Cholesky factor, escalating a diagonal jitter on failure.

    Starts at ``1e-10 * scale`` and doubles up to 8 times; raises
    :class:`ConditioningError` when the budget is exhausted. Returns the
    factor of the (possibly jittered) matrix together with the jittered
    matrix itself.
    """
    try:
        return np.linalg.cholesky(mat), mat
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER_START * scale
    for _ in range(_JITTER_DOUBLINGS + 1):
        bumped = mat + jitter * np.eye(mat.shape[0])
        try:
            return np.linalg.cholesky(bumped), bumped
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise ConditioningError(
        f"matrix not positive definite after jitter up to {jitter / 2.0:.3e}"
    )


def covariance_matrix(model: VariogramModel, coords, target=None) -> np.ndarray:
    """Covariance matrix ``C(h_ij) = sill - gamma(h_ij)`` over sites.

    With ``target`` given, the returned matrix is (n+1) x (n+1) with the
    target site last. Coordinates must be pairwise distinct. The matrix is
    jittered just enough to admit a Cholesky factorization.
    """
    coords = np.asarray(coords, dtype=float)
    if target is not None:
        coords = np.vstack([coords, np.asarray(target, dtype=float)])
    n = coords.shape[0]
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    if n > 1 and np.min(d[np.triu_indices(n, 1)]) <= 0:
        raise DomainError("site coordinates must be pairwise distinct")
    cov = model.sill - variogram_eval(model, d)
    np.fill_diagonal(cov, model.sill)
    _, cov = cholesky_with_jitter(cov, model.sill)
    return cov


def correlation_matrix(model: VariogramModel, coords) -> np.ndarray:
    """Residual correlation matrix ``C(h)/C(0)`` with an exact unit diagonal."""
    corr = covariance_matrix(model, coords) / model.sill
    np.fill_diagonal(corr, 1.0)
    return corr


def variogram_to_json(model: VariogramModel, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def variogram_from_json(path) -> VariogramModel:
    with open(path) as fh:
        return VariogramModel.from_dict(json.load(fh))
