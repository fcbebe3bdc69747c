"""Simulation study: spatially correlated functional fields with linear drift.

Fields live on a 10-function cubic B-spline basis over [0, 1]: each basis
coefficient is a zero-mean Gaussian field with exponential covariance
``sigma2 * exp(-h / phi)`` over an irregular site layout in [0, 2] x [0, 3],
drawn independently across coefficients. The drift is linear in the site
coordinates with random smooth coefficient curves, and white measurement
noise is added on a 101-point grid. :func:`run_scenario` evaluates the full
prediction-band pipeline at 10 held-out validation sites.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .basis import BasisSpec
from .bootstrap import BootstrapConfig, prediction_interval, run_bootstrap
from .curves import CurveSet, smooth
from .exceptions import FkedError
from .kriging import fit_fked
from .ordering import band_width, domain_coverage
from .variogram import VariogramConfig, cholesky_with_jitter

logger = logging.getLogger(__name__)

REGION = ((0.0, 2.0), (0.0, 3.0))
N_FIT_POOL = 90
N_VALIDATION = 10
MIN_SITE_SEPARATION = 0.08
DEFAULT_LAYOUT_SEED = 202303

# mean vector of the two coordinate-slope coefficient priors
SLOPE_PRIOR_MEAN = np.array([0.2, 0.2, 0.4, 0.4, 0.6, 0.6, 0.8, 0.8, 1.0, 1.0])
PRIOR_VAR = 0.05


@dataclass(frozen=True)
class Scenario:
    """One cell of the simulation design."""

    n: int = 25
    sigma2: float = 0.25
    phi: float = 0.5
    noise_var: float = 0.09
    n_basis: int = 10
    n_grid: int = 101
    n_validation: int = N_VALIDATION
    seed: int = 0
    layout_seed: int = DEFAULT_LAYOUT_SEED

    def __post_init__(self):
        if not 3 <= self.n <= N_FIT_POOL:
            raise ValueError(f"n must be between 3 and {N_FIT_POOL}")
        if not 1 <= self.n_validation <= N_VALIDATION:
            raise ValueError(f"n_validation must be between 1 and {N_VALIDATION}")
        if self.sigma2 <= 0 or self.phi <= 0 or self.noise_var < 0:
            raise ValueError("require sigma2 > 0, phi > 0, noise_var >= 0")

    @property
    def basis(self) -> BasisSpec:
        return BasisSpec((0.0, 1.0), self.n_basis, 0.0)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_grid)

    @property
    def label(self) -> str:
        return f"s{self.sigma2:g}_p{self.phi:g}"

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "sigma2": self.sigma2,
            "phi": self.phi,
            "noise_var": self.noise_var,
            "n_basis": self.n_basis,
            "n_grid": self.n_grid,
            "n_validation": self.n_validation,
            "seed": self.seed,
            "layout_seed": self.layout_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**known)


def generate_sites(layout_seed: int = DEFAULT_LAYOUT_SEED):
    """Irregular site layout: 90 nested fitting sites plus 10 validation sites.

    Uniform draws on the region, rejecting any point closer than the
    minimum separation to an accepted one; taking the first n fitting
    sites nests the smaller designs inside the larger ones, and the
    validation sites are the same for every n.
    """
    rng = np.random.default_rng(layout_seed)
    (x0, x1), (y0, y1) = REGION
    accepted = []
    while len(accepted) < N_FIT_POOL + N_VALIDATION:
        pt = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if all(np.linalg.norm(pt - q) >= MIN_SITE_SEPARATION for q in accepted):
            accepted.append(pt)
    accepted = np.asarray(accepted)
    return accepted[:N_FIT_POOL], accepted[N_FIT_POOL:]


def _scenario_coords(scenario: Scenario):
    fit_pool, validation = generate_sites(scenario.layout_seed)
    return fit_pool[: scenario.n], validation[: scenario.n_validation]


def _site_ids(scenario: Scenario):
    fit_ids = tuple(f"s{i + 1:02d}" for i in range(scenario.n))
    val_ids = tuple(f"v{i + 1:02d}" for i in range(scenario.n_validation))
    return fit_ids, val_ids


def _streams(scenario: Scenario):
    field_ss, drift_ss, noise_ss = np.random.SeedSequence(scenario.seed).spawn(3)
    return (
        np.random.default_rng(field_ss),
        np.random.default_rng(drift_ss),
        np.random.default_rng(noise_ss),
    )


def gen_field(scenario: Scenario, rng=None) -> CurveSet:
    """Simulate the residual field at fitting plus validation sites.

    Each of the 10 basis coefficients is one draw of a zero-mean Gaussian
    field with covariance ``sigma2 * exp(-h / phi)``, independent across
    coefficients, via dense Cholesky.
    """
    if rng is None:
        rng, _, _ = _streams(scenario)
    fit_coords, val_coords = _scenario_coords(scenario)
    coords = np.vstack([fit_coords, val_coords])
    h = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    cov = scenario.sigma2 * np.exp(-h / scenario.phi)
    L, _ = cholesky_with_jitter(cov, scenario.sigma2)
    xi = L @ rng.standard_normal((coords.shape[0], scenario.n_basis))
    fit_ids, val_ids = _site_ids(scenario)
    return CurveSet(fit_ids + val_ids, coords, xi, scenario.basis, scenario.grid)


def gen_drift(scenario: Scenario, rng=None):
    """Simulate the drift: intercept plus slopes in longitude and latitude.

    Coefficient curves share the field's basis; their basis coefficients
    are drawn from N(1, 0.05 I) for the intercept and N(mean vector,
    0.05 I) for the two slopes. Returns the drift curve set (all sites)
    and the true coefficient vectors.
    """
    if rng is None:
        _, rng, _ = _streams(scenario)
    nb = scenario.n_basis
    sd = np.sqrt(PRIOR_VAR)
    alpha = 1.0 + sd * rng.standard_normal(nb)
    mean = SLOPE_PRIOR_MEAN if nb == SLOPE_PRIOR_MEAN.size else np.ones(nb)
    beta_lon = mean + sd * rng.standard_normal(nb)
    beta_lat = mean + sd * rng.standard_normal(nb)
    fit_coords, val_coords = _scenario_coords(scenario)
    coords = np.vstack([fit_coords, val_coords])
    coeffs = alpha + np.outer(coords[:, 0], beta_lon) + np.outer(coords[:, 1], beta_lat)
    fit_ids, val_ids = _site_ids(scenario)
    drift = CurveSet(fit_ids + val_ids, coords, coeffs, scenario.basis, scenario.grid)
    return drift, {"alpha": alpha, "beta_lon": beta_lon, "beta_lat": beta_lat}


@dataclass
class SimulatedData:
    """One simulated dataset: raw observation tables plus the noiseless truth."""

    scenario: Scenario
    fit_raw: pd.DataFrame
    validation_raw: pd.DataFrame
    fit_truth: CurveSet
    validation_truth: CurveSet
    field: CurveSet
    drift: CurveSet
    true_coefficients: dict


def _long_table(ids, coords, values, grid) -> pd.DataFrame:
    n, m = values.shape
    return pd.DataFrame(
        {
            "site_id": np.repeat(ids, m),
            "x": np.repeat(coords[:, 0], m),
            "y": np.repeat(coords[:, 1], m),
            "t": np.tile(grid, n),
            "value": values.ravel(),
        }
    )


def gen_observations(scenario: Scenario) -> SimulatedData:
    """Drift plus field plus white noise, as raw long-format tables.

    The truth curve sets hold the noiseless drift + field curves; the raw
    tables carry grid evaluations with N(0, noise_var) errors and are
    ready for smoothing.
    """
    rng_field, rng_drift, rng_noise = _streams(scenario)
    field = gen_field(scenario, rng_field)
    drift, true_coefs = gen_drift(scenario, rng_drift)
    truth = field.with_coeffs(field.coeffs + drift.coeffs)
    values = truth.values() + np.sqrt(scenario.noise_var) * rng_noise.standard_normal(
        (truth.n_sites, scenario.n_grid)
    )
    n = scenario.n
    fit_ids, val_ids = _site_ids(scenario)
    fit_coords, val_coords = _scenario_coords(scenario)
    return SimulatedData(
        scenario=scenario,
        fit_raw=_long_table(fit_ids, fit_coords, values[:n], scenario.grid),
        validation_raw=_long_table(val_ids, val_coords, values[n:], scenario.grid),
        fit_truth=truth.subset(range(n)),
        validation_truth=truth.subset(range(n, truth.n_sites)),
        field=field,
        drift=drift,
        true_coefficients=true_coefs,
    )


@dataclass
class ScenarioReport:
    """Per-repetition metrics and their per-site aggregate for one scenario."""

    scenario: Scenario
    detail: pd.DataFrame
    summary: pd.DataFrame
    n_failed: int = 0

    def functional_coverage(self, threshold: float = 1.0) -> pd.DataFrame:
        """Percentage of repetitions with domain coverage >= threshold, by site/method."""
        g = self.detail.groupby(["site", "method"])["domain_coverage"]
        out = 100.0 * g.apply(lambda c: float(np.mean(c >= threshold)))
        return out.rename("functional_coverage").reset_index()

    def write(self, summary_path, detail_path=None):
        self.summary.to_csv(summary_path, index=False)
        if detail_path is not None:
            self.detail.to_csv(detail_path, index=False)


def _one_repetition(scenario, rep, rep_seed, B, alpha, drift_penalty, vconfig, orderings):
    sim = gen_observations(replace(scenario, seed=int(rep_seed)))
    curves = smooth(sim.fit_raw, scenario.basis, scenario.grid)
    model = fit_fked(
        curves, use_coordinates=True, penalty=drift_penalty, variogram_config=vconfig
    )
    truth_values = sim.validation_truth.values()
    site_seeds = np.random.SeedSequence(int(rep_seed)).spawn(scenario.n_validation)
    rows = []
    for v in range(scenario.n_validation):
        target = sim.validation_truth.coords[v]
        config = BootstrapConfig(
            B=B, alpha=alpha, seed=int(site_seeds[v].generate_state(1)[0])
        )
        boot = run_bootstrap(model, target, config=config)
        for method in orderings:
            band = prediction_interval(boot, ordering=method)
            bw = band_width(band)
            rows.append(
                {
                    "scenario": scenario.label,
                    "n": scenario.n,
                    "sigma2": scenario.sigma2,
                    "phi": scenario.phi,
                    "rep": rep,
                    "site": sim.validation_truth.site_ids[v],
                    "method": method,
                    "mean_width": bw.mean,
                    "max_width": bw.max,
                    "domain_coverage": domain_coverage(band, truth_values[v]),
                }
            )
    return rows


def run_scenario(
    scenario: Scenario,
    B: int = 500,
    S: int = 100,
    alpha: float = 0.05,
    drift_penalty="gcv",
    variogram_config: VariogramConfig = None,
    orderings=("mbd", "l2"),
    threads: int = 1,
    coverage_threshold: float = 1.0,
) -> ScenarioReport:
    """Repeat the simulate/fit/bootstrap pipeline S times and aggregate metrics.

    Every repetition derives its seed from the scenario seed; repetitions
    (and the bootstrap replicates inside them) are merged in index order,
    so the report is deterministic for a fixed master seed regardless of
    ``threads``. Repetition failures are logged and skipped; more than 10%
    failing is an error.
    """
    if B < 1 or S < 1:
        raise ValueError("require B >= 1 and S >= 1")
    vconfig = VariogramConfig() if variogram_config is None else variogram_config
    rep_seeds = [
        int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(scenario.seed).spawn(S)
    ]

    def one(rep):
        try:
            return _one_repetition(
                scenario, rep, rep_seeds[rep], B, alpha, drift_penalty, vconfig, orderings
            )
        except FkedError as exc:
            logger.warning("repetition %d failed: %s", rep, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(S)))
    else:
        results = []
        for rep in range(S):
            results.append(one(rep))
            logger.info("scenario %s: repetition %d/%d done", scenario.label, rep + 1, S)
    n_failed = sum(r is None for r in results)
    if n_failed > 0.1 * S:
        raise FkedError(f"{n_failed}/{S} scenario repetitions failed")
    if n_failed:
        warnings.warn(f"{n_failed}/{S} scenario repetitions failed and were skipped")

    detail = pd.DataFrame([row for r in results if r is not None for row in r])
    grouped = detail.groupby(["scenario", "n", "sigma2", "phi", "site", "method"], sort=True)
    summary = grouped.agg(
        mean_width=("mean_width", "mean"),
        domain_coverage=("domain_coverage", "mean"),
        functional_coverage=(
            "domain_coverage",
            lambda c: 100.0 * float(np.mean(c >= coverage_threshold)),
        ),
    ).reset_index()
    return ScenarioReport(scenario, detail, summary, n_failed)
