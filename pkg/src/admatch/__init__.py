"""Attributable counts from daily exposure series by propensity-score matching."""

from .core import (DailyRecord, DailySeries, GapPolicy, IndicatorRules, TreatmentAssignment, assign_treatment,
                   derive_indicators, lag_mean, read_series, validate, write_series)
from .design import (DesignMatrix, DesignSpec, PropensityFit, assemble_design, cubic_spline_basis,
                     fit_logistic_irls, predict_propensity, tensor_basis, tprs_basis)
from .errors import NumericalError, RankDeficiencyError, ValidationError
from .impact import (ImpactEstimate, ImpactTable, ci, conditional_variance, impute_and_diff,
                     sensitivity_exclude, stratified_impact, total_ad, variance_ad)
from .matching import MatchMap, match_multiplicity, nn_match, overlap_check
from .balance import balance_table, pct_bias, std_diff_post, std_diff_pre

__version__ = "0.1.0"
