"""Ordinary kriging of functional residuals and the assembled FKED model.

Kriging weights are scalars solving the trace-variogram bordered system
with a Lagrange multiplier enforcing unbiasedness; the curve prediction at
a new site adds the kriged residual curve to the drift prediction there.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec, eval_basis
from .curves import CurveSet
from .drift import CovariateSet, DriftFit, iterate_drift, predict_drift
from .exceptions import ConditioningError
from .variogram import (
    EmpiricalVariogram,
    VariogramConfig,
    VariogramModel,
    empirical_trace_semivariogram,
    fit_variogram,
    variogram_eval,
)

_SUM_TOL = 1e-10


@dataclass
class KrigingSystem:
    """Solved ordinary-kriging system.

    ``gamma_matrix`` is the (n+1) x (n+1) bordered left-hand side (trace
    variogram among sites, unit border, zero corner), ``rhs`` the site to
    target variogram column with the trailing 1. ``coincident_site`` marks
    an exactness short-circuit (target on a data site with zero nugget).
    """

    gamma_matrix: np.ndarray
    rhs: np.ndarray
    weights: np.ndarray
    lagrange: float
    coincident_site: int = None


def _solve_bordered(A, b):
    """Solve the bordered system with one refinement pass for the constraint."""
    x = np.linalg.solve(A, b)
    # one step of iterative refinement tightens the unbiasedness row
    x = x + np.linalg.solve(A, b - A @ x)
    return x


def solve_ok_from_distances(
    model: VariogramModel, dist_matrix: np.ndarray, dist_to_target: np.ndarray
) -> KrigingSystem:
    """Ordinary-kriging solve given precomputed distances.

    The bootstrap calls this thousands of times with fixed geometry and a
    replicate-specific variogram, so distances are taken ready-made.
    """
    n = dist_matrix.shape[0]
    gamma = variogram_eval(model, dist_matrix)
    np.fill_diagonal(gamma, 0.0)
    gamma0 = variogram_eval(model, dist_to_target)

    coincident = None
    hits = np.nonzero(dist_to_target == 0.0)[0]
    if hits.size:
        coincident = int(hits[0])

    A = np.empty((n + 1, n + 1))
    b = np.empty(n + 1)
    # scale the variogram block by the sill: weights are invariant and the
    # system conditioning no longer depends on the data magnitude
    s = model.sill
    A[:n, :n] = gamma / s
    A[n, :n] = 1.0
    A[:n, n] = 1.0
    A[n, n] = 0.0
    b[:n] = gamma0 / s
    b[n] = 1.0

    if coincident is not None and model.nugget == 0.0:
        weights = np.zeros(n)
        weights[coincident] = 1.0
        return KrigingSystem(A, b, weights, 0.0, coincident)
    if coincident is not None:
        warnings.warn(
            f"target coincides with site index {coincident} under a nonzero nugget; "
            "the kriging prediction is not exact there"
        )

    jitter, solved = 0.0, None
    for _ in range(9):
        try:
            x = _solve_bordered(A + jitter * np.diag(np.r_[np.ones(n), 0.0]), b)
        except np.linalg.LinAlgError:
            x = None
        if x is not None and np.all(np.isfinite(x)):
            solved = x
            if abs(np.sum(x[:n]) - 1.0) <= _SUM_TOL:
                break
        jitter = 1e-12 if jitter == 0.0 else jitter * 2.0
    if solved is None:
        raise ConditioningError("singular ordinary-kriging system after jitter budget")
    weights = solved[:n]
    defect = 1.0 - np.sum(weights)
    if abs(defect) > _SUM_TOL:
        # distribute the residual constraint defect (solver roundoff) evenly
        weights = weights + defect / n
    return KrigingSystem(A, b, weights, float(solved[n] * s), coincident)


def solve_ok_weights(model: VariogramModel, coords, target) -> KrigingSystem:
    """Solve for the ordinary-kriging weights of a target site.

    Weights sum to one within 1e-10; when the target coincides with a data
    site and the nugget is zero the exact-interpolation solution is
    returned directly.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] < 2:
        raise ValueError("ordinary kriging needs at least 2 sites")
    target = np.asarray(target, dtype=float).ravel()
    dist_matrix = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    dist_to_target = np.linalg.norm(coords - target, axis=1)
    return solve_ok_from_distances(model, dist_matrix, dist_to_target)


def predict_residual(system: KrigingSystem, residuals: CurveSet) -> np.ndarray:
    """Kriged residual curve: coefficient vector ``sum_i w_i coeffs_i``."""
    if system.weights.size != residuals.n_sites:
        raise ValueError(
            f"{system.weights.size} weights for {residuals.n_sites} residual curves"
        )
    return system.weights @ residuals.coeffs


@dataclass
class FkedModel:
    """Converged drift fit plus the residual variogram, ready for prediction."""

    drift: DriftFit
    variogram: VariogramModel
    empirical: EmpiricalVariogram
    residuals: CurveSet
    basis: BasisSpec
    response: CurveSet
    covariates: CovariateSet
    vconfig: VariogramConfig
    coords_as_covariates: bool = False

    @property
    def coords(self) -> np.ndarray:
        return self.response.coords

    def target_scalars(self, target, extra=None):
        """Raw scalar covariate vector for a target site."""
        parts = []
        if self.coords_as_covariates:
            parts.append(np.asarray(target, dtype=float).ravel())
        if extra is not None and np.size(extra):
            parts.append(np.asarray(extra, dtype=float).ravel())
        if not parts:
            return None
        return np.concatenate(parts)


def fit_fked(
    Y: CurveSet,
    X: CovariateSet = None,
    coef_basis: BasisSpec = None,
    penalty=0.0,
    variogram_config: VariogramConfig = None,
    use_coordinates: bool = False,
    max_iter: int = 10,
) -> FkedModel:
    """Fit the full model: iterative drift, then the final residual variogram."""
    vconfig = VariogramConfig() if variogram_config is None else variogram_config
    if use_coordinates:
        coord_X = CovariateSet.from_coordinates(Y)
        if X is None:
            X = coord_X
        else:
            scalars = coord_X.scalars
            names = coord_X.scalar_names
            if X.n_scalar:
                scalars = np.column_stack([scalars, X.scalars])
                names = names + X.scalar_names
            X = CovariateSet(scalars, names, X.functionals, X.functional_names)
    drift = iterate_drift(
        Y, X, coef_basis, penalty, variogram_config=vconfig, max_iter=max_iter
    )
    emp = empirical_trace_semivariogram(
        drift.residuals, vconfig.n_bins, vconfig.max_dist_fraction
    )
    model = fit_variogram(emp, vconfig.families, vconfig.fix_nugget_zero, vconfig.weighted)
    return FkedModel(
        drift=drift,
        variogram=model,
        empirical=emp,
        residuals=drift.residuals,
        basis=Y.basis,
        response=Y,
        covariates=X if X is not None else CovariateSet(),
        vconfig=vconfig,
        coords_as_covariates=use_coordinates,
    )


def fked_predict(
    model: FkedModel, target, scalars=None, functionals=None, return_parts: bool = False
):
    """Predict the curve at a target site: drift plus kriged residual.

    ``target`` is the (x, y) location; ``scalars``/``functionals`` are the
    covariates there (coordinates are filled in automatically when the
    model was fit with ``use_coordinates``). Returns values on the model
    grid, optionally with the (drift, residual, system) parts.
    """
    full_scalars = model.target_scalars(target, scalars)
    mu0 = predict_drift(model.drift, full_scalars, functionals)
    system = solve_ok_weights(model.variogram, model.coords, target)
    e0_coef = predict_residual(system, model.residuals)
    e0 = eval_basis(model.basis, model.drift.grid) @ e0_coef
    pred = mu0 + e0
    if return_parts:
        return pred, mu0, e0, system
    return pred


def save_model(model: FkedModel, path):
    """Persist a fitted model as JSON."""
    d = model.drift
    payload = {
        "basis": model.basis.to_dict(),
        "grid": model.response.grid.tolist(),
        "sites": [
            [sid, float(x), float(y)]
            for sid, (x, y) in zip(model.response.site_ids, model.response.coords)
        ],
        "response_coeffs": model.response.coeffs.tolist(),
        "residual_coeffs": model.residuals.coeffs.tolist(),
        "covariates": {
            "scalars": None if model.covariates.scalars is None else model.covariates.scalars.tolist(),
            "scalar_names": list(model.covariates.scalar_names),
            "functional_coeffs": [x.coeffs.tolist() for x in model.covariates.functionals],
            "functional_names": list(model.covariates.functional_names),
        },
        "coords_as_covariates": model.coords_as_covariates,
        "drift": {
            "alpha": d.alpha.tolist(),
            "gammas": d.gammas.tolist(),
            "betas": d.betas.tolist(),
            "K": d.K.tolist(),
            "edf": d.edf,
            "rss_gls": d.rss_gls,
            "n_obs": d.n_obs,
            "penalty": d.penalty,
            "aic_trace": list(d.aic_trace),
            "converged": d.converged,
            "warning": d.warning,
            "coef_basis": d.coef_basis.to_dict(),
            "functional_means": None if d.functional_means is None else d.functional_means.tolist(),
        },
        "variogram": model.variogram.to_dict(),
        "empirical": {
            "lags": model.empirical.lags.tolist(),
            "gamma": model.empirical.gamma.tolist(),
            "counts": model.empirical.counts.tolist(),
            "max_dist": model.empirical.max_dist,
        },
        "variogram_config": model.vconfig.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_model(path) -> FkedModel:
    """Inverse of :func:`save_model`."""
    with open(path) as fh:
        payload = json.load(fh)
    basis = BasisSpec.from_dict(payload["basis"])
    grid = np.asarray(payload["grid"], dtype=float)
    ids = tuple(row[0] for row in payload["sites"])
    coords = np.array([[row[1], row[2]] for row in payload["sites"]])
    response = CurveSet(ids, coords, np.asarray(payload["response_coeffs"]), basis, grid)
    residuals = response.with_coeffs(np.asarray(payload["residual_coeffs"]))
    cv = payload["covariates"]
    functionals = tuple(
        CurveSet(ids, coords, np.asarray(c), basis, grid) for c in cv["functional_coeffs"]
    )
    covariates = CovariateSet(
        None if cv["scalars"] is None else np.asarray(cv["scalars"]),
        tuple(cv["scalar_names"]),
        functionals,
        tuple(cv["functional_names"]),
    )
    dd = payload["drift"]
    coef_basis = BasisSpec.from_dict(dd["coef_basis"])
    drift = DriftFit(
        alpha=np.asarray(dd["alpha"], dtype=float),
        gammas=np.asarray(dd["gammas"], dtype=float).reshape(-1, coef_basis.n_basis),
        betas=np.asarray(dd["betas"], dtype=float).reshape(-1, coef_basis.n_basis),
        K=np.asarray(dd["K"], dtype=float),
        edf=float(dd["edf"]),
        rss_gls=float(dd["rss_gls"]),
        n_obs=int(dd["n_obs"]),
        fitted=response.values() - residuals.values(),
        residuals=residuals,
        coef_basis=coef_basis,
        grid=grid,
        penalty=float(dd["penalty"]),
        scalar_names=tuple(cv["scalar_names"]),
        functional_names=tuple(cv["functional_names"]),
        functional_means=None
        if dd["functional_means"] is None
        else np.asarray(dd["functional_means"], dtype=float),
        aic_trace=list(dd["aic_trace"]),
        converged=bool(dd["converged"]),
        warning=dd["warning"],
    )
    emp = EmpiricalVariogram(
        np.asarray(payload["empirical"]["lags"], dtype=float),
        np.asarray(payload["empirical"]["gamma"], dtype=float),
        np.asarray(payload["empirical"]["counts"], dtype=int),
        float(payload["empirical"]["max_dist"]),
    )
    return FkedModel(
        drift=drift,
        variogram=VariogramModel.from_dict(payload["variogram"]),
        empirical=emp,
        residuals=residuals,
        basis=basis,
        response=response,
        covariates=covariates,
        vconfig=VariogramConfig.from_dict(payload["variogram_config"]),
        coords_as_covariates=bool(payload["coords_as_covariates"]),
    )
