"""Semi-parametric spatial bootstrap for curve prediction bands.

Residual curves are whitened with the Cholesky factor of their fitted
covariance, resampled whole (n+1 draws with replacement), recorrelated
through the covariance augmented with the target site, and turned into
synthetic responses. Each replicate refits the model and predicts at the
target; the contrast (replicate prediction minus replicate truth at the
target) approximates the prediction-error distribution, and the envelope
of its most central curves gives the band.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .basis import eval_basis, gram_matrix, penalty_matrix
from .drift import ConcurrentDesign, _covariate_matrices, predict_drift
from .exceptions import BootstrapError, FkedError
from .kriging import FkedModel, fit_fked, fked_predict, solve_ok_from_distances
from .ordering import CurveEnsemble, PredictionBand, central_envelope, l2_order, modified_band_depth
from .variogram import (
    TraceVariogramBinning,
    cholesky_with_jitter,
    covariance_eval,
    covariance_matrix,
    fit_variogram,
)

DEFAULT_SEED = 20230

ORDERINGS = ("mbd", "l2")
REFIT_MODES = ("single_pass", "full_iterative")


@dataclass(frozen=True)
class BootstrapConfig:
    """Replicate count, band level, RNG seed and refit/ordering policy."""

    B: int = 500
    alpha: float = 0.05
    seed: int = DEFAULT_SEED
    ordering: str = "mbd"
    refit_mode: str = "single_pass"
    threads: int = 1
    max_drop_fraction: float = 0.05

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        if self.refit_mode not in REFIT_MODES:
            raise ValueError(f"refit_mode must be one of {REFIT_MODES}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def decorrelate(residual_values: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Whiten residual curves across sites: ``zeta = L^-1 E`` with ``Sigma = L L^T``."""
    E = np.atleast_2d(np.asarray(residual_values, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    L, _ = cholesky_with_jitter(sigma, float(np.mean(np.diag(sigma))))
    return solve_triangular(L, E, lower=True)


def recorrelate(zeta_star: np.ndarray, sigma: np.ndarray, c_n: np.ndarray, sigma2: float):
    """Reintroduce spatial correlation through the target-augmented covariance.

    ``zeta_star`` has n+1 rows; the augmented matrix pairs the site block
    ``sigma`` with the site-to-target covariances ``c_n`` and the variance
    ``sigma2`` at the target. Returns the n site rows and the target row.
    """
    zeta_star = np.atleast_2d(np.asarray(zeta_star, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    c_n = np.asarray(c_n, dtype=float).ravel()
    n = sigma.shape[0]
    if zeta_star.shape[0] != n + 1:
        raise ValueError(f"zeta_star must have {n + 1} rows, got {zeta_star.shape[0]}")
    lam = np.empty((n + 1, n + 1))
    lam[:n, :n] = sigma
    lam[:n, n] = c_n
    lam[n, :n] = c_n
    lam[n, n] = sigma2
    R, _ = cholesky_with_jitter(lam, float(sigma2))
    out = R @ zeta_star
    return out[:n], out[n]


@dataclass
class BootstrapResult:
    """Contrast curves, prediction and band for one target site."""

    grid: np.ndarray
    prediction: np.ndarray
    contrasts: np.ndarray
    band: PredictionBand
    order_stats: np.ndarray
    config: BootstrapConfig
    n_dropped: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def ensemble(self) -> CurveEnsemble:
        return CurveEnsemble(self.contrasts, self.grid)

    def metadata(self) -> dict:
        return {
            "B": self.config.B,
            "alpha": self.config.alpha,
            "seed": self.config.seed,
            "ordering": self.config.ordering,
            "refit_mode": self.config.refit_mode,
            "dropped_replicates": self.n_dropped,
            "timings": self.timings,
        }


def prediction_interval(result: BootstrapResult, ordering: str = None, alpha: float = None):
    """(Re)build the band from stored contrasts.

    ``lower = prediction - max`` and ``upper = prediction - min`` over the
    pointwise envelope of the ``floor(B (1 - alpha))`` most central
    contrast curves under the requested ordering.
    """
    ordering = result.config.ordering if ordering is None else ordering
    alpha = result.config.alpha if alpha is None else alpha
    lo_c, hi_c = central_envelope(result.ensemble, alpha, ordering)
    return PredictionBand(
        grid=result.grid,
        lower=result.prediction - hi_c,
        upper=result.prediction - lo_c,
        prediction=result.prediction,
    )


class _ReplicateEngine:
    """Shared precomputations for all replicates of one (model, target) pair."""

    def __init__(self, model: FkedModel, target, scalars, functionals, config):
        drift = model.drift
        self.model = model
        self.config = config
        self.grid = drift.grid
        coords = model.coords
        n = model.response.n_sites

        self.mu_sites = drift.fitted
        resid_values = model.residuals.values()
        self.sigma = covariance_matrix(model.variogram, coords)
        self.L = np.linalg.cholesky(self.sigma)
        self.zeta = solve_triangular(self.L, resid_values, lower=True)

        target = np.asarray(target, dtype=float).ravel()
        self.dist_matrix = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
        self.dist_to_target = np.linalg.norm(coords - target, axis=1)
        if np.any(self.dist_to_target == 0.0):
            raise ValueError("bootstrap target must be distinct from every fitted site")
        c_n = covariance_eval(model.variogram, self.dist_to_target)
        sigma2 = model.variogram.sill
        lam = np.empty((n + 1, n + 1))
        lam[:n, :n] = self.sigma
        lam[:n, n] = c_n
        lam[n, :n] = c_n
        lam[n, n] = sigma2
        self.R, _ = cholesky_with_jitter(lam, sigma2)

        self.full_scalars = model.target_scalars(target, scalars)
        self.functionals0 = functionals
        self.mu_target = predict_drift(drift, self.full_scalars, functionals)
        self.n = n
        self.target = target
        self.extra_scalars = scalars

        # curves are re-expressed on the response basis by plain projection
        B_resp = eval_basis(model.basis, self.grid)
        self.project = np.linalg.solve(B_resp.T @ B_resp, B_resp.T)
        self.B_resp = B_resp
        self.gram = gram_matrix(model.basis)
        self.binning = TraceVariogramBinning(
            coords, model.vconfig.n_bins, model.vconfig.max_dist_fraction
        )

        if config.refit_mode == "single_pass":
            cov_values, scalar_mean, scalar_std, functional_means = _covariate_matrices(
                model.response, model.covariates
            )
            self.design = ConcurrentDesign(
                cov_values,
                eval_basis(drift.coef_basis, self.grid),
                penalty_matrix(drift.coef_basis),
                drift.penalty,
                drift.K,
            )
            self.B_coef = eval_basis(drift.coef_basis, self.grid)
            # standardized covariate values of the target, one entry per block
            w0 = [1.0]
            if scalar_std is not None:
                z0 = (self.full_scalars - scalar_mean) / scalar_std
                w0.extend(z0.tolist())
            if functional_means is not None:
                fx = np.atleast_2d(np.asarray(functionals, dtype=float))
                for q in range(functional_means.shape[0]):
                    w0.append(fx[q] - functional_means[q])
            self.target_design = w0

    def _predict_drift_from_theta(self, theta):
        f = self.B_coef @ theta.T  # (M, R)
        mu0 = np.zeros(self.grid.size)
        for r, w in enumerate(self.target_design):
            mu0 = mu0 + w * f[:, r]
        return mu0

    def run(self, j: int):
        """One replicate: resample, recorrelate, refit, predict, contrast."""
        rng = np.random.default_rng([self.config.seed, j])
        idx = rng.integers(0, self.n, size=self.n + 1)
        e_star = self.R @ self.zeta[idx]
        y_star_sites = self.mu_sites + e_star[: self.n]
        y_star_target = self.mu_target + e_star[self.n]

        if self.config.refit_mode == "single_pass":
            theta, fitted, _ = self.design.solve(y_star_sites)
            resid_coeffs = (self.project @ (y_star_sites - fitted).T).T
            emp = self.binning.estimate(resid_coeffs, self.gram)
            vconf = self.model.vconfig
            vg = fit_variogram(
                emp, (self.model.variogram.family,), vconf.fix_nugget_zero, vconf.weighted
            )
            system = solve_ok_from_distances(vg, self.dist_matrix, self.dist_to_target)
            mu0_star = self._predict_drift_from_theta(theta)
            e0_star = self.B_resp @ (system.weights @ resid_coeffs)
            y_hat_target = mu0_star + e0_star
        else:
            coeffs = (self.project @ y_star_sites.T).T
            y_star_curves = self.model.response.with_coeffs(coeffs)
            # the stored CovariateSet already merges coordinate covariates in
            replicate_model = fit_fked(
                y_star_curves,
                X=self.model.covariates,
                coef_basis=self.model.drift.coef_basis,
                penalty=self.model.drift.penalty,
                variogram_config=self.model.vconfig,
            )
            y_hat_target = fked_predict(
                replicate_model,
                self.target,
                scalars=self.full_scalars,
                functionals=self.functionals0,
            )
        return y_hat_target - y_star_target


def run_bootstrap(
    model: FkedModel,
    target,
    scalars=None,
    functionals=None,
    config: BootstrapConfig = None,
) -> BootstrapResult:
    """Draw B bootstrap replicates at a target site and build the band.

    Replicates are independent given per-replicate RNG streams derived from
    ``(seed, replicate index)`` and are merged by index, so results do not
    depend on the thread count. Replicates whose refit fails are dropped;
    more than ``max_drop_fraction`` of them failing is an error.
    """
    config = BootstrapConfig() if config is None else config
    t0 = time.perf_counter()
    engine = _ReplicateEngine(model, target, scalars, functionals, config)

    def safe_run(j):
        try:
            return engine.run(j)
        except FkedError:
            return None

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            raw = list(pool.map(safe_run, range(config.B)))
    else:
        raw = [safe_run(j) for j in range(config.B)]
    contrasts = [c for c in raw if c is not None]
    n_dropped = config.B - len(contrasts)
    if n_dropped > config.max_drop_fraction * config.B:
        raise BootstrapError(
            f"{n_dropped}/{config.B} bootstrap replicates failed to refit"
        )
    contrasts = np.asarray(contrasts)

    prediction = fked_predict(model, target, scalars=scalars, functionals=functionals)
    result = BootstrapResult(
        grid=engine.grid,
        prediction=prediction,
        contrasts=contrasts,
        band=None,
        order_stats=None,
        config=config,
        n_dropped=n_dropped,
    )
    ens = result.ensemble
    result.order_stats = (
        modified_band_depth(ens) if config.ordering == "mbd" else l2_order(ens)
    )
    result.band = prediction_interval(result)
    result.timings = {"total_seconds": time.perf_counter() - t0}
    return result
