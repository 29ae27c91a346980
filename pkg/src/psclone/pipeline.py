"""Defaults and the end-to-end design / analysis sequence."""

from __future__ import annotations

from dataclasses import dataclass

import pandas as pd

from .dataset import Dataset, release_escrow
from .design import BalanceReport, BinPlan, DesignReport, TrimDecision, assign_bins, balance_report, freeze_design, trim_support
from .effects import unit_effects
from .matching import MatchSet, MatchSpec, match
from .propensity import PropensityModel, ScoreTable, fit_propensity, score

# value, provenance
DEFAULTS = {
    "bins": (10, "convention: decile subclassification"),
    "bin_method": ("quantile", "convention"),
    "threshold": (0.1, "convention: |standardized mean difference| <= 0.1"),
    "k": (10, "study: one-to-ten matching"),
    "caliper": ("auto", "convention: 0.2 x pooled sd of linear propensity"),
    "caliper_sd": (0.2, "convention"),
    "method": ("greedy", "study names greedy and optimal; greedy chosen"),
    "replacement": (False, "convention"),
    "direction": ("both", "study: clones for visited and unvisited units"),
    "within_bins": (False, "open: matching not constrained to bins"),
    "ridge": (1e-6, "convention: guarantees a finite maximiser"),
    "max_iter": (50, "convention"),
    "tol": (1e-8, "convention"),
    "trim": ("arm-overlap", "study: drop units without possible clones"),
}


def default_config() -> dict:
    return {k: v for k, (v, _) in DEFAULTS.items()}


@dataclass
class StudyDesign:
    model: PropensityModel
    scores: ScoreTable
    trim: TrimDecision
    plan: BinPlan
    balance: BalanceReport
    design: DesignReport


def design_study(ds: Dataset, config: dict | None = None, override: bool = False, scores: ScoreTable | None = None) -> StudyDesign:
    """Fit, trim, bin (retained units), diagnose and freeze, without touching outcomes.

    ``scores`` replaces the fitted model's scores (e.g. true propensities in
    simulation); the model is still fitted and recorded.
    """
    cfg = default_config() | (config or {})
    model = fit_propensity(ds, cfg["ridge"], cfg["max_iter"], cfg["tol"])
    sc = score(model, ds) if scores is None else scores
    trim = trim_support(sc, cfg["trim"])
    plan = assign_bins(sc, cfg["bins"], cfg["bin_method"], retained=trim)
    bal = balance_report(ds, plan, cfg["threshold"])
    design = freeze_design(model, plan, bal, trim, override=override)
    return StudyDesign(model, sc, trim, plan, bal, design)


def match_spec(config: dict | None = None) -> MatchSpec:
    cfg = default_config() | (config or {})
    return MatchSpec(cfg["method"], int(cfg["k"]), cfg["caliper"], bool(cfg["replacement"]), cfg["direction"],
                     bool(cfg["within_bins"]), float(cfg["caliper_sd"]))


@dataclass
class Analysis:
    study: StudyDesign
    matches: MatchSet
    released: Dataset
    effects: pd.DataFrame


def analyze(ds: Dataset, study: StudyDesign, spec: MatchSpec) -> Analysis:
    """Match under the frozen design, then release escrow and difference the clone groups."""
    ms = match(study.scores, study.design, spec)
    released = release_escrow(ds, study.design)
    return Analysis(study, ms, released, unit_effects(ms, released))
