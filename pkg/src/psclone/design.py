"""Propensity stratification, balance diagnostics, common-support trimming and design freezing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dataset import Dataset, sha256_json
from .errors import BinningError, DesignNotReady, ProvenanceError, SupportError
from .propensity import PropensityModel, ScoreTable

log = logging.getLogger(__name__)

QUANTILE = "quantile"
FIXED_WIDTH = "fixed-width"


@dataclass
class BinPlan:
    edges: np.ndarray
    unit_ids: np.ndarray
    bins: np.ndarray
    method: str
    dataset_digest: str = ""

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def counts(self) -> np.ndarray:
        return np.bincount(self.bins, minlength=self.n_bins)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"unit_id": self.unit_ids, "bin": self.bins})

    def summary(self) -> dict:
        return {"method": self.method, "edges": [float(e) for e in self.edges], "counts": self.counts().tolist()}


def assign_bins(
    scores: ScoreTable,
    n_bins: int = 10,
    method: str = QUANTILE,
    edges=None,
    retained=None,
) -> BinPlan:
    """Stratify units on linear propensity.

    Bin ``i`` holds ``edges[i] <= lp < edges[i+1]``; the last bin is closed on
    the right. Quantile bins start at rank ``i*n // n_bins`` so sizes differ by
    at most one when ``lp`` values are distinct; tied values always share a
    bin. Explicit ``edges`` override ``n_bins`` and ``method``.
    ``retained`` (ids or a TrimDecision) restricts the plan to those units.
    """
    if retained is not None:
        ids = getattr(retained, "retained", retained)
        scores = scores.subset(ids)
    lp = scores.lp
    if len(lp) == 0:
        raise BinningError("no units to bin")
    if edges is not None:
        edges = np.asarray(edges, dtype=float)
        method = "explicit"
        if len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise BinningError("edges must be strictly increasing with at least two entries")
        if lp.min() < edges[0] or lp.max() > edges[-1]:
            raise BinningError("explicit edges do not cover every unit's linear propensity")
    else:
        if n_bins < 1:
            raise BinningError("n_bins must be >= 1")
        lo, hi = float(lp.min()), float(lp.max())
        if method == QUANTILE:
            distinct = np.unique(lp)
            if len(distinct) < n_bins:
                raise BinningError(f"only {len(distinct)} distinct lp values for {n_bins} quantile bins; use fewer bins")
            srt = np.sort(lp)
            starts = [(i * len(lp)) // n_bins for i in range(1, n_bins)]
            edges = np.concatenate([[lo], srt[starts], [hi]])
            if np.any(np.diff(edges[:-1]) <= 0) or (n_bins > 1 and edges[-2] > hi):
                raise BinningError("tied lp values collapse a quantile bin; use fewer bins")
        elif method == FIXED_WIDTH:
            edges = np.linspace(lo, hi, n_bins + 1)
        else:
            raise BinningError(f"unknown binning method {method!r}")
        if edges[-1] <= edges[-2]:
            edges[-1] = np.nextafter(edges[-2], np.inf)
    bins = np.searchsorted(edges, lp, side="right") - 1
    bins = np.clip(bins, 0, len(edges) - 2)
    if method == QUANTILE and np.any(np.bincount(bins, minlength=len(edges) - 1) == 0):
        raise BinningError("tied lp values collapse a quantile bin; use fewer bins")
    return BinPlan(edges, scores.unit_ids.copy(), bins.astype(np.int64), method, scores.dataset_digest)


def standardized_difference(t: np.ndarray, c: np.ndarray) -> float:
    """(mean_t - mean_c) / sqrt((s_t^2 + s_c^2) / 2) with n-1 sample variances.

    A single-unit arm contributes zero variance. Zero spread with a nonzero
    mean gap gives +-inf.
    """
    mt, mc = t.mean(), c.mean()
    vt = t.var(ddof=1) if len(t) > 1 else 0.0
    vc = c.var(ddof=1) if len(c) > 1 else 0.0
    pooled = math.sqrt((vt + vc) / 2)
    diff = mt - mc
    if pooled == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(diff / pooled)


@dataclass
class BalanceReport:
    table: pd.DataFrame
    overall: pd.DataFrame
    threshold: float
    worst_abs_smd: float
    balanced: bool
    flagged_bins: list[int]
    dataset_digest: str = ""
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "threshold": self.threshold,
            "worst_abs_smd": self.worst_abs_smd,
            "balanced": self.balanced,
            "flagged_bins": self.flagged_bins,
            "overall_smd": {r.covariate: float(r.smd) for r in self.overall.itertuples()},
        }

    def per_bin(self) -> pd.DataFrame:
        """One row per bin: arm counts and worst |smd| over covariates."""
        g = self.table.assign(abs_smd=self.table["smd"].abs()).groupby("bin")
        return pd.DataFrame({
            "n_treated": g["n_treated"].first(),
            "n_control": g["n_control"].first(),
            "worst_abs_smd": g["abs_smd"].max(),
        })


def _column_stats(values: np.ndarray, bins: np.ndarray, n_bins: int):
    n = np.bincount(bins, minlength=n_bins).astype(float)
    s = np.bincount(bins, weights=values, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / n
        dev = values - mean[bins]
        ss = np.bincount(bins, weights=dev * dev, minlength=n_bins)
        var = np.where(n > 1, ss / (n - 1), 0.0)
    return n, mean, var


def _smd(mt, mc, vt, vc):
    pooled = np.sqrt((vt + vc) / 2)
    diff = mt - mc
    with np.errstate(invalid="ignore", divide="ignore"):
        out = diff / pooled
    out = np.where(pooled == 0, np.where(diff == 0, 0.0, np.copysign(np.inf, diff)), out)
    return out


def balance_report(
    ds: Dataset,
    plan: BinPlan,
    threshold: float = 0.1,
    covariates=None,
    subgroup=None,
) -> BalanceReport:
    """Within-bin and overall standardised mean differences for every encoded covariate.

    Bins in which one arm is empty are flagged and left out of the verdict.
    ``subgroup`` (ids) restricts the diagnostics to a user-declared subgroup.
    """
    ids = plan.unit_ids
    bins = plan.bins
    if subgroup is not None:
        keep = np.isin(ids, np.asarray(list(subgroup), dtype=object))
        ids, bins = ids[keep], bins[keep]
    pos = ds.positions(ids)
    z = ds.z[pos]
    names = ds.schema.encoded_names()
    cols = range(len(names)) if covariates is None else [names.index(c) for c in covariates]
    nb = plan.n_bins
    tmask = z == 1
    rows = []
    overall = []
    n_t = np.bincount(bins[tmask], minlength=nb)
    n_c = np.bincount(bins[~tmask], minlength=nb)
    flagged = [int(b) for b in range(nb) if (n_t[b] == 0) != (n_c[b] == 0)]
    both = (n_t > 0) & (n_c > 0)
    for j in cols:
        x = ds.X[pos, j]
        _, mt, vt = _column_stats(x[tmask], bins[tmask], nb)
        _, mc, vc = _column_stats(x[~tmask], bins[~tmask], nb)
        smd = np.where(both, _smd(mt, mc, vt, vc), np.nan)
        pooled = np.sqrt((vt + vc) / 2)
        for b in range(nb):
            rows.append((b, names[j], int(n_t[b]), int(n_c[b]), mt[b], mc[b], pooled[b], smd[b]))
        overall.append((names[j], standardized_difference(x[tmask], x[~tmask]) if tmask.any() and (~tmask).any() else np.nan))
    table = pd.DataFrame(rows, columns=["bin", "covariate", "n_treated", "n_control", "mean_treated", "mean_control", "pooled_sd", "smd"])
    table = table.sort_values(["bin", "covariate"], kind="stable").reset_index(drop=True)
    overall = pd.DataFrame(overall, columns=["covariate", "smd"])
    valid = table["smd"].dropna().abs()
    worst = float(valid.max()) if len(valid) else 0.0
    warnings = []
    if flagged:
        msg = f"bins {flagged} have an empty arm and are excluded from the balance verdict"
        warnings.append(msg)
        log.warning(msg)
    return BalanceReport(table, overall, threshold, worst, bool(worst <= threshold), flagged, plan.dataset_digest, warnings)


@dataclass
class TrimDecision:
    retained: np.ndarray
    dropped: pd.DataFrame
    support: tuple[float, float]
    rule: str
    dataset_digest: str = ""

    def counts(self) -> dict:
        c = {"retained": int(len(self.retained))}
        for arm in ("treated", "control"):
            for side in ("below-support", "above-support"):
                sel = (self.dropped["arm"] == arm) & (self.dropped["reason"] == side)
                c[f"{arm}/{side}"] = int(sel.sum())
        return c

    def summary(self) -> dict:
        return {"rule": self.rule, "support": [float(self.support[0]), float(self.support[1])], "counts": self.counts()}


def trim_support(scores: ScoreTable, rule="arm-overlap") -> TrimDecision:
    """Drop units whose ``lp`` lies outside the common-support interval.

    ``rule`` is ``"arm-overlap"`` (support = [max of arm minima, min of arm
    maxima]) or a tuple ``("lp-window", lo, hi)``.
    """
    lp, z = scores.lp, scores.z
    if not (z == 1).any() or not (z == 0).any():
        raise SupportError("both arms must be non-empty before trimming")
    if rule == "arm-overlap":
        t, c = lp[z == 1], lp[z == 0]
        lo, hi = max(t.min(), c.min()), min(t.max(), c.max())
        label = "arm-overlap"
    elif isinstance(rule, (tuple, list)) and rule[0] == "lp-window":
        lo, hi = float(rule[1]), float(rule[2])
        label = f"lp-window({lo!r},{hi!r})"
    else:
        raise ValueError(f"unknown trim rule {rule!r}")
    below = lp < lo
    above = lp > hi
    keep = ~(below | above)
    if not (z[keep] == 1).any() or not (z[keep] == 0).any():
        raise SupportError(f"trimming to [{lo:g}, {hi:g}] empties an arm; the data cannot support a comparison")
    drop = ~keep
    dropped = pd.DataFrame({
        "unit_id": scores.unit_ids[drop],
        "arm": np.where(z[drop] == 1, "treated", "control"),
        "lp": lp[drop],
        "reason": np.where(below[drop], "below-support", "above-support"),
    })
    return TrimDecision(scores.unit_ids[keep].copy(), dropped, (float(lo), float(hi)), label, scores.dataset_digest)


@dataclass
class DesignReport:
    model_digest: str
    plan: BinPlan
    balance: BalanceReport
    trim: TrimDecision
    frozen: bool
    override: bool
    dataset_digest: str
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dataset_digest": self.dataset_digest,
            "model_digest": self.model_digest,
            "frozen": self.frozen,
            "override": self.override,
            "bins": self.plan.summary(),
            "balance": self.balance.summary(),
            "trim": self.trim.summary(),
            "retained_digest": sha256_json(sorted(map(str, self.trim.retained))),
            "history": self.history,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return sha256_json(self.to_dict())


def freeze_design(
    model: PropensityModel,
    plan: BinPlan,
    balance: BalanceReport,
    trim: TrimDecision,
    override: bool = False,
    history=(),
) -> DesignReport:
    """Freeze the study design before any outcome is seen.

    Refuses when balance was not achieved unless ``override`` is set, in which
    case the override is recorded. ``history`` carries summaries of earlier
    refinement iterations (refit, rebin, rediagnose) for the audit trail.
    """
    digests = {model.dataset_digest, plan.dataset_digest, balance.dataset_digest, trim.dataset_digest}
    if len(digests) != 1:
        raise ProvenanceError("design artifacts reference different datasets")
    if not balance.balanced and not override:
        raise DesignNotReady(
            f"worst within-bin |smd| {balance.worst_abs_smd:.3f} exceeds threshold {balance.threshold}; "
            "refine the model or pass override=True"
        )
    return DesignReport(model.digest(), plan, balance, trim, True, bool(override and not balance.balanced),
                        model.dataset_digest, list(history))
