"""Granger causality, spectral connectivity, transfer entropy and time-varying VAR tools."""

from .data import (
    HistorySpec,
    StationarityReport,
    TimeSeriesSet,
    demean,
    detrend,
    lagged_design,
    read_csv,
    stationarity_screen,
    validate,
    write_csv,
)
from .errors import GrangerLabError, NumericalError, ValidationError
from .gc_time import (
    GcTimeResult,
    conditional_granger_f_test,
    granger_f_test,
    granger_tests,
    granger_wald_test,
)
from .resampling import SurrogateScheme, correct_multiplicity, surrogate_pvalue
from .simulation import GeneratorSpec, builtin_scenarios, scenario, simulate
from .spectral import (
    SpectralCausalityResult,
    SpectralDecomposition,
    dtf,
    geweke_spectral_gc,
    pdc,
    spectral_decompose,
    spectral_significance_surrogate,
)
from .te import TeEstimate, select_embedding, te_gaussian, te_kernel, te_local, te_permutation_test
from .tvvar import (
    KalmanConfig,
    TvCausalityResult,
    TvVarTrajectory,
    kalman_em,
    tv_causality,
    tv_var_adaptive,
    tv_var_basis,
    tv_var_kalman,
    tv_var_window,
)
from .var import VarModel, fit_ar, fit_var, residual_whiteness, select_order

__version__ = "0.1.0"
