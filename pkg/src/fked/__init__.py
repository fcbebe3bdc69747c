"""Functional kriging with external drift and bootstrap prediction bands."""

from .basis import BasisSpec, eval_basis, gram_matrix, penalty_matrix
from .bootstrap import (
    BootstrapConfig,
    BootstrapResult,
    decorrelate,
    prediction_interval,
    recorrelate,
    run_bootstrap,
)
from .curves import (
    CurveSet,
    fcv_select,
    l2_inner,
    read_curveset_csv,
    read_raw_csv,
    smooth,
    write_curveset_csv,
)
from .drift import CovariateSet, DriftFit, aic, fit_concurrent, iterate_drift, predict_drift
from .exceptions import (
    BasisMismatchError,
    BootstrapError,
    ConditioningError,
    DomainError,
    FkedError,
    IllPosedFitError,
    SelectionError,
    VariogramFitError,
)
from .kriging import (
    FkedModel,
    KrigingSystem,
    fit_fked,
    fked_predict,
    load_model,
    predict_residual,
    save_model,
    solve_ok_weights,
)
from .ordering import (
    BandWidth,
    CurveEnsemble,
    PredictionBand,
    band_depth,
    band_width,
    central_envelope,
    domain_coverage,
    functional_coverage,
    l2_order,
    modified_band_depth,
)
from .simulate import (
    Scenario,
    ScenarioReport,
    SimulatedData,
    gen_drift,
    gen_field,
    gen_observations,
    generate_sites,
    run_scenario,
)
from .variogram import (
    EmpiricalVariogram,
    VariogramConfig,
    VariogramModel,
    covariance_matrix,
    correlation_matrix,
    empirical_trace_semivariogram,
    fit_variogram,
    variogram_eval,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
