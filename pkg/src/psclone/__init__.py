"""Propensity-score clone matching for unit-level causal effects of a binary intervention."""

from .dataset import CovariateSchema, Dataset, load_dataset, release_escrow, summarize_covariate
from .design import assign_bins, balance_report, freeze_design, trim_support
from .effects import aggregate, build_target_list, compare_lists, rank_units, unit_effects
from .matching import MatchSpec, impute_clones, match
from .propensity import fit_propensity, score, score_histograms

__version__ = "0.1.0"

__all__ = [
    "CovariateSchema", "Dataset", "load_dataset", "release_escrow", "summarize_covariate",
    "fit_propensity", "score", "score_histograms",
    "assign_bins", "balance_report", "trim_support", "freeze_design",
    "MatchSpec", "match", "impute_clones",
    "unit_effects", "aggregate", "build_target_list", "rank_units", "compare_lists",
]
