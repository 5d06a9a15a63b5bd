"""Calibration of monitoring-station readings against a shared latent
spatio-temporal field, with automatic detection of biased sensors.

The model couples an AR(1) latent field with exponential spatial
correlation to per-station calibration coefficients.  Estimation is
exact maximum likelihood via Kalman filtering/smoothing and EM, with
innovation-form standard errors.
"""

from .core import (
    CalibrationMatrix,
    DataError,
    Dataset,
    ModelParams,
    NumericalError,
    StandardizationRecord,
    StationSet,
    filter_stations_by_missing,
    standardize,
    validate_dataset,
)
from .detect import (
    AlphaPanel,
    ClusterResult,
    DetectionReport,
    RankTable,
    RatioDiagnostic,
    SiteComparison,
    build_detection_report,
    compare_sites,
    hierarchical_cluster,
    rank_groups,
    ratio_diagnostic,
)
from .em import (
    FitConfig,
    FitResult,
    SufficientStats,
    ThetaSearch,
    e_step,
    fit,
    init_params,
    stationary_prior,
    update_alpha,
    update_beta,
    update_g,
    update_sigma2,
    update_theta,
)
from .infomatrix import (
    InfoMatrixResult,
    ParamIndexMap,
    derivative_check,
    information_matrix,
)
from .kalman import FilterOutput, SmootherOutput, run_filter, run_smoother
from .simulate import (
    RecoveryReport,
    ScenarioConfig,
    center_bias_scenario,
    corner_bias_scenario,
    generate,
    grid_stations,
    run_recovery,
)
from .spatial import (
    DistanceMatrix,
    InnovationCovariance,
    exponential_covariance,
    pairwise_distances,
)

__version__ = "0.1.0"
