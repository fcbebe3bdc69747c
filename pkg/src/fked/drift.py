"""Functional concurrent linear drift with spatially correlated residuals.

The drift of the response field is a concurrent linear model: at every
domain point t the response depends on a functional intercept, scalar
covariates and functional covariates evaluated at the same t, all with
coefficient curves expanded on a B-spline basis. Estimation is penalized
generalized least squares with residual covariance ``K (x) I_M`` (correlated
across sites, independent across grid points); :func:`iterate_drift`
alternates drift fits with trace-variogram estimates of K until the AIC
stabilizes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .basis import BasisSpec, eval_basis, penalty_matrix
from .curves import CurveSet
from .exceptions import ConditioningError, FkedError, IllPosedFitError
from .variogram import (
    VariogramConfig,
    correlation_matrix,
    empirical_trace_semivariogram,
    fit_variogram,
)

AIC_RATE_TOL = 1e-3
MAX_ITER = 10

# log-spaced GCV grid for the shared coefficient-roughness penalty,
# relative to a data-derived reference magnitude
_GCV_GRID = np.logspace(-4.0, 2.0, 7)


@dataclass(frozen=True)
class CovariateSet:
    """Scalar and functional covariates aligned with the response sites.

    ``scalars`` is an n x P matrix; ``functionals`` a list of Q curve sets
    sharing the response's evaluation grid. Standardization happens inside
    the fit, never here.
    """

    scalars: np.ndarray = None
    scalar_names: tuple = ()
    functionals: tuple = ()
    functional_names: tuple = ()

    def __post_init__(self):
        if self.scalars is not None:
            scalars = np.atleast_2d(np.asarray(self.scalars, dtype=float))
            object.__setattr__(self, "scalars", scalars)
            if not self.scalar_names:
                object.__setattr__(
                    self, "scalar_names", tuple(f"c{p + 1}" for p in range(scalars.shape[1]))
                )
            if len(self.scalar_names) != scalars.shape[1]:
                raise ValueError("scalar_names must match the number of scalar covariates")
        object.__setattr__(self, "functionals", tuple(self.functionals))
        if self.functionals and not self.functional_names:
            object.__setattr__(
                self, "functional_names", tuple(f"x{q + 1}" for q in range(len(self.functionals)))
            )
        if len(self.functional_names) != len(self.functionals):
            raise ValueError("functional_names must match the number of functional covariates")

    @property
    def n_scalar(self) -> int:
        return 0 if self.scalars is None else self.scalars.shape[1]

    @property
    def n_functional(self) -> int:
        return len(self.functionals)

    @classmethod
    def from_coordinates(cls, curves: CurveSet) -> "CovariateSet":
        """Longitude/latitude of the curve sites as the two scalar covariates."""
        return cls(scalars=curves.coords.copy(), scalar_names=("lon", "lat"))


def _validate_covariates(Y: CurveSet, X: CovariateSet):
    if X.scalars is not None and X.scalars.shape[0] != Y.n_sites:
        raise ValueError(
            f"scalar covariates have {X.scalars.shape[0]} rows for {Y.n_sites} sites"
        )
    for name, xq in zip(X.functional_names, X.functionals):
        if xq.n_sites != Y.n_sites:
            raise ValueError(f"functional covariate {name!r} has a different site count")
        if xq.grid.shape != Y.grid.shape or not np.allclose(xq.grid, Y.grid):
            raise ValueError(f"functional covariate {name!r} must share the response grid")


class ConcurrentDesign:
    """Whitened, penalized design for the concurrent model at fixed (X, K, penalty).

    Factorizations depend only on covariate values, the coefficient basis,
    the penalty and K, so the same instance solves many response matrices
    (the bootstrap refits thousands of replicates through one design).
    """

    def __init__(self, cov_values, B, pen_mat, penalty, K):
        # cov_values: list of (n, M) covariate value matrices, intercept first
        self.cov_values = [np.asarray(v, dtype=float) for v in cov_values]
        self.B = B
        n = self.cov_values[0].shape[0]
        try:
            self.L_K = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            raise ConditioningError("residual correlation matrix K is not positive definite")
        self.white = [solve_triangular(self.L_K, v, lower=True) for v in self.cov_values]
        R, (M, L) = len(self.cov_values), B.shape
        V = np.stack(self.white)  # (R, n, M)
        S = np.einsum("rim,pim->rpm", V, V)  # (R, R, M)
        A0 = np.einsum("ml,rpm,mk->rlpk", B, S, B).reshape(R * L, R * L)
        A = A0 + penalty * np.kron(np.eye(R), pen_mat)
        try:
            self.cho = cho_factor(A)
        except np.linalg.LinAlgError:
            raise IllPosedFitError("singular penalized design in the concurrent model")
        self.edf = float(np.trace(cho_solve(self.cho, A0)))
        self.R, self.L, self.M, self.n = R, L, M, n
        self.penalty = penalty

    def solve(self, Y_values):
        """Return (theta (R, L), fitted values (n, M), whitened RSS)."""
        Yw = solve_triangular(self.L_K, Y_values, lower=True)
        b = np.empty((self.R, self.L))
        for r, vw in enumerate(self.white):
            b[r] = self.B.T @ np.einsum("im,im->m", vw, Yw)
        theta = cho_solve(self.cho, b.ravel()).reshape(self.R, self.L)
        f = self.B @ theta.T  # (M, R) coefficient curves on the grid
        fitted = sum(v * f[:, r] for r, v in enumerate(self.cov_values))
        fitted_w = sum(vw * f[:, r] for r, vw in enumerate(self.white))
        rss = float(np.sum((Yw - fitted_w) ** 2))
        return theta, fitted, rss


@dataclass
class DriftFit:
    """Fitted concurrent drift model.

    ``alpha``, ``gammas`` and ``betas`` are coefficient vectors/rows on
    ``coef_basis``; ``gammas`` apply to raw-scale scalar covariates and
    ``betas`` to pointwise-centered functional covariates (the centering
    curves are stored in ``functional_means``).
    """

    alpha: np.ndarray
    gammas: np.ndarray
    betas: np.ndarray
    K: np.ndarray
    edf: float
    rss_gls: float
    n_obs: int
    fitted: np.ndarray
    residuals: CurveSet
    coef_basis: BasisSpec
    grid: np.ndarray
    penalty: float
    scalar_names: tuple = ()
    functional_names: tuple = ()
    functional_means: np.ndarray = None
    aic_trace: list = field(default_factory=list)
    converged: bool = True
    warning: str = None

    @property
    def aic(self) -> float:
        return aic(self)

    @property
    def n_sites(self) -> int:
        return self.K.shape[0]


def aic(fit: DriftFit) -> float:
    """``N log(RSS_gls / N) + 2 edf`` with N the stacked observation count."""
    if fit.rss_gls <= 0.0:
        warnings.warn("zero generalized residual sum of squares; AIC degenerates to -inf")
        return -np.inf
    return float(fit.n_obs * np.log(fit.rss_gls / fit.n_obs) + 2.0 * fit.edf)


def _covariate_matrices(Y, X):
    """Covariate value matrices in standardized space, intercept first."""
    n, M = Y.n_sites, Y.grid.size
    cov_values = [np.ones((n, M))]
    scalar_mean = scalar_std = None
    if X.n_scalar:
        scalar_mean = X.scalars.mean(axis=0)
        scalar_std = X.scalars.std(axis=0)
        if np.any(scalar_std <= 0):
            bad = [X.scalar_names[p] for p in np.nonzero(scalar_std <= 0)[0]]
            raise IllPosedFitError(f"constant scalar covariate(s) {bad} make the design singular")
        z = (X.scalars - scalar_mean) / scalar_std
        for p in range(X.n_scalar):
            cov_values.append(np.broadcast_to(z[:, p : p + 1], (n, M)).copy())
    functional_means = None
    if X.n_functional:
        functional_means = np.empty((X.n_functional, M))
        for q, xq in enumerate(X.functionals):
            vals = xq.values(Y.grid)
            functional_means[q] = vals.mean(axis=0)
            cov_values.append(vals - functional_means[q])
    return cov_values, scalar_mean, scalar_std, functional_means


def _select_penalty(Y, X, coef_basis, K):
    """GCV over a log-spaced grid for the shared coefficient roughness penalty."""
    cov_values, *_ = _covariate_matrices(Y, X)
    Yv = Y.values()
    B = eval_basis(coef_basis, Y.grid)
    pen_mat = penalty_matrix(coef_basis)
    # balance the unpenalized curvature magnitude against the penalty matrix
    ref = max(np.trace(B.T @ B) / max(np.trace(pen_mat), 1e-300), 1e-300)
    N = Y.n_sites * Y.grid.size
    best_lam, best_score = 0.0, np.inf
    for lam in ref * _GCV_GRID:
        try:
            d = ConcurrentDesign(cov_values, B, pen_mat, lam, K)
            _, _, rss = d.solve(Yv)
        except FkedError:
            continue
        if d.edf >= N:
            continue
        score = (rss / N) / (1.0 - d.edf / N) ** 2
        if score < best_score:
            best_lam, best_score = lam, score
    if not np.isfinite(best_score):
        raise IllPosedFitError("GCV penalty selection found no admissible penalty")
    return best_lam


def fit_concurrent(
    Y: CurveSet,
    X: CovariateSet = None,
    coef_basis: BasisSpec = None,
    penalty=0.0,
    K: np.ndarray = None,
) -> DriftFit:
    """Penalized GLS fit of the concurrent drift model.

    ``K`` is the residual correlation matrix across sites (identity when
    omitted, i.e. independent functional observations); ``penalty`` is a
    number or ``"gcv"`` to select the shared roughness penalty from a
    log-spaced grid.
    """
    X = CovariateSet() if X is None else X
    _validate_covariates(Y, X)
    coef_basis = Y.basis if coef_basis is None else coef_basis
    n, M = Y.n_sites, Y.grid.size
    if K is None:
        K = np.eye(n)
    else:
        K = np.asarray(K, dtype=float)
        if K.shape != (n, n) or not np.allclose(K, K.T):
            raise ValueError(f"K must be a symmetric {n} x {n} matrix")
    if isinstance(penalty, str):
        if penalty != "gcv":
            raise ValueError(f"penalty must be a number or 'gcv', got {penalty!r}")
        penalty = _select_penalty(Y, X, coef_basis, K)
    elif penalty < 0:
        raise ValueError("penalty must be nonnegative")

    cov_values, scalar_mean, scalar_std, functional_means = _covariate_matrices(Y, X)
    design = ConcurrentDesign(
        cov_values, eval_basis(coef_basis, Y.grid), penalty_matrix(coef_basis), penalty, K
    )
    theta, fitted, rss = design.solve(Y.values())

    P, Q = X.n_scalar, X.n_functional
    alpha = theta[0].copy()
    gammas = np.zeros((P, coef_basis.n_basis))
    if P:
        gammas = theta[1 : 1 + P] / scalar_std[:, None]
        alpha = alpha - (scalar_mean / scalar_std) @ theta[1 : 1 + P]
    betas = theta[1 + P :].copy() if Q else np.zeros((0, coef_basis.n_basis))

    # residual curves re-expressed on the response basis (exact when the
    # drift values lie in its span, least-squares projection otherwise)
    B_resp = eval_basis(Y.basis, Y.grid)
    resid_coeffs = Y.coeffs - np.linalg.solve(B_resp.T @ B_resp, B_resp.T @ fitted.T).T
    residuals = Y.with_coeffs(resid_coeffs)

    fit = DriftFit(
        alpha=alpha,
        gammas=gammas,
        betas=betas,
        K=K,
        edf=design.edf,
        rss_gls=rss,
        n_obs=n * M,
        fitted=fitted,
        residuals=residuals,
        coef_basis=coef_basis,
        grid=Y.grid.copy(),
        penalty=float(penalty),
        scalar_names=X.scalar_names,
        functional_names=X.functional_names,
        functional_means=functional_means,
    )
    fit.aic_trace = [aic(fit)]
    return fit


def predict_drift(fit: DriftFit, scalars=None, functionals=None) -> np.ndarray:
    """Drift curve for one site's covariates, evaluated on the model grid.

    ``scalars`` are raw-scale values (length P); ``functionals`` are curves
    on the model grid, shape (Q, M). Functional covariates are centered
    with the training means stored in the fit.
    """
    P, Q = fit.gammas.shape[0], fit.betas.shape[0]
    if P:
        scalars = np.asarray(scalars, dtype=float).ravel()
        if scalars.size != P:
            raise ValueError(f"expected {P} scalar covariates, got {scalars.size}")
    elif scalars is not None and np.size(scalars):
        raise ValueError("model has no scalar covariates")
    if Q:
        functionals = np.atleast_2d(np.asarray(functionals, dtype=float))
        if functionals.shape != (Q, fit.grid.size):
            raise ValueError(
                f"expected functional covariates of shape ({Q}, {fit.grid.size}), "
                f"got {functionals.shape}"
            )
    elif functionals is not None and np.size(functionals):
        raise ValueError("model has no functional covariates")

    B = eval_basis(fit.coef_basis, fit.grid)
    mu = B @ fit.alpha
    for p in range(P):
        mu = mu + scalars[p] * (B @ fit.gammas[p])
    for q in range(Q):
        mu = mu + (functionals[q] - fit.functional_means[q]) * (B @ fit.betas[q])
    return mu


def iterate_drift(
    Y: CurveSet,
    X: CovariateSet = None,
    coef_basis: BasisSpec = None,
    penalty=0.0,
    variogram_config: VariogramConfig = None,
    max_iter: int = MAX_ITER,
    aic_rate_tol: float = AIC_RATE_TOL,
) -> DriftFit:
    """Alternate drift fits and residual-correlation updates until AIC settles.

    Starts from an independent-residuals fit, then repeatedly estimates the
    trace-variogram of the residual curves, converts the fitted model into
    a correlation matrix K and refits. Stops when the relative AIC change
    drops below ``aic_rate_tol`` (0.1% by default) or ``max_iter`` fits have
    been performed. Variogram or conditioning failures return the last
    valid fit with its ``warning`` field set.
    """
    if Y.n_sites < 3:
        raise ValueError("iterating the drift needs at least 3 sites for the variogram")
    vconfig = VariogramConfig() if variogram_config is None else variogram_config
    fit = fit_concurrent(Y, X, coef_basis, penalty, K=None)
    trace = list(fit.aic_trace)
    numeric_penalty = fit.penalty
    fit.converged = False
    while len(trace) < max_iter:
        try:
            emp = empirical_trace_semivariogram(
                fit.residuals, vconfig.n_bins, vconfig.max_dist_fraction
            )
            model = fit_variogram(emp, vconfig.families, vconfig.fix_nugget_zero, vconfig.weighted)
            K = correlation_matrix(model, Y.coords)
            new_fit = fit_concurrent(Y, X, coef_basis, numeric_penalty, K=K)
        except FkedError as exc:
            fit.warning = f"iteration {len(trace) + 1} aborted: {exc}"
            warnings.warn(fit.warning)
            break
        trace.append(aic(new_fit))
        new_fit.aic_trace = trace
        fit = new_fit
        rate = abs(trace[-1] - trace[-2]) / abs(trace[-2])
        if rate < aic_rate_tol:
            fit.converged = True
            break
    fit.aic_trace = trace
    return fit
