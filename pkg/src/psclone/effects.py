"""Unit-level effect estimates, aggregation, decile targeting lists and list comparison."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd

from .dataset import Dataset
from .errors import EmptySelectionError, EscrowViolation, EvaluationError
from .matching import MatchSet, impute_clones

N_DECILES = 10
TIE_BREAK = "unit_id ascending"


def unit_effects(ms: MatchSet, ds: Dataset) -> pd.DataFrame:
    """Effect table with one row per matched focal unit.

    Columns: unit_id, z, k_prime, observed, imputed, tau_hat. For a treated
    focal ``tau_hat = observed - imputed``; for a control focal
    ``tau_hat = imputed - observed``.
    """
    if ds.escrow:
        raise EscrowViolation("outcomes are still in escrow")
    imp = impute_clones(ms, ds).table
    observed = ds.outcome[ds.positions(imp["focal_id"])]
    z = imp["focal_z"].to_numpy()
    tau = np.where(z == 1, observed - imp["imputed"].to_numpy(), imp["imputed"].to_numpy() - observed)
    return pd.DataFrame({
        "unit_id": imp["focal_id"].to_numpy(dtype=object),
        "z": z.astype(int),
        "k_prime": imp["k_prime"].to_numpy(dtype=int),
        "observed": observed,
        "imputed": imp["imputed"].to_numpy(),
        "tau_hat": tau,
    })


def refine_effects(effects: pd.DataFrame, refine: Callable[[pd.DataFrame], pd.DataFrame]) -> pd.DataFrame:
    """Extension point for model-based smoothing of clone estimates.

    ``refine`` receives the effect table and must return one with the same
    unit ids and a ``tau_hat`` column. Nothing here fits such a model.
    """
    out = refine(effects.copy())
    if "tau_hat" not in out.columns or set(out["unit_id"]) != set(effects["unit_id"]):
        raise EvaluationError("refined table must keep the unit ids and provide tau_hat")
    return out


class Aggregate(NamedTuple):
    mean: float
    sd: float
    count: int


def aggregate(effects: pd.DataFrame, subgroup=None, ds: Dataset | None = None) -> Aggregate:
    """Mean, sample sd and count of ``tau_hat`` over a subgroup.

    ``subgroup`` may be None (all rows), a boolean mask, a collection of unit
    ids, or a callable receiving the effect rows (joined with raw covariates
    when ``ds`` is given) and returning a mask.
    """
    frame = effects
    if subgroup is None:
        mask = np.ones(len(frame), dtype=bool)
    elif callable(subgroup):
        if ds is not None:
            cov = ds.covariate_frame().loc[frame["unit_id"]].reset_index(drop=True)
            frame = pd.concat([effects.reset_index(drop=True), cov.drop(columns=[c for c in cov if c in effects])], axis=1)
        mask = np.asarray(subgroup(frame), dtype=bool)
    else:
        arr = np.asarray(subgroup)
        if arr.dtype == bool and len(arr) == len(frame):
            mask = arr
        else:
            mask = frame["unit_id"].isin(set(arr.tolist())).to_numpy()
    tau = frame["tau_hat"].to_numpy()[mask]
    if len(tau) == 0:
        raise EmptySelectionError("subgroup selects no effect rows")
    sd = float(np.std(tau, ddof=1)) if len(tau) > 1 else 0.0
    return Aggregate(float(tau.mean()), sd, int(len(tau)))


@dataclass
class TargetList:
    """Units ordered by descending score; ``deciles`` label 10 = top group."""

    unit_ids: np.ndarray
    scores: np.ndarray
    deciles: np.ndarray
    label: str = "causal"
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.unit_ids)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "rank": np.arange(1, len(self) + 1),
            "unit_id": self.unit_ids,
            "score": self.scores,
            "decile": self.deciles,
        })

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path, label="list") -> "TargetList":
        f = pd.read_csv(path, dtype={"unit_id": str})
        return rank_units(f["unit_id"], f["score"], label)


def decile_labels(n: int, groups: int = N_DECILES) -> np.ndarray:
    """Labels for positions 0..n-1 of a descending ordering: top group gets ``groups``."""
    if n == 0:
        return np.zeros(0, dtype=int)
    g = min(groups, n)
    pos = np.arange(n)
    return groups - (pos * g) // n


def rank_units(unit_ids, scores, label: str = "list") -> TargetList:
    """Order units by descending score, ties by unit id, and cut into deciles.

    With fewer than ten units each unit forms its own group, labelled from 10
    downwards; the collapse is recorded in ``metadata``.
    """
    ids = np.asarray(unit_ids, dtype=object).astype(str)
    s = np.asarray(scores, dtype=float)
    order = np.lexsort((ids, -s))
    n = len(ids)
    meta = {"tie_break": TIE_BREAK, "n_units": n, "n_groups": min(N_DECILES, n)}
    if n < N_DECILES:
        meta["collapsed"] = True
    return TargetList(ids[order].astype(object), s[order], decile_labels(n), label, meta)


def build_target_list(effects: pd.DataFrame, population: str = "untreated") -> TargetList:
    """Rank units by estimated effect of the intervention.

    By default only untreated (control focal) units are listed: their
    estimate is imputed treated outcome minus observed outcome.
    """
    if population == "untreated":
        rows = effects[effects["z"] == 0]
    elif population == "all":
        rows = effects
    else:
        raise ValueError("population must be 'untreated' or 'all'")
    tl = rank_units(rows["unit_id"], rows["tau_hat"], "causal")
    tl.metadata["population"] = population
    return tl


@dataclass
class DecileComparison:
    table: pd.DataFrame
    realized_definition: str

    def plot_data(self) -> pd.DataFrame:
        return self.table[["decile", "list", "mean"]]

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False)

    def plot_data_to_csv(self, path) -> None:
        self.plot_data().to_csv(path, index=False)

    def mean(self, label: str, decile: int) -> float:
        row = self.table[(self.table["list"] == label) & (self.table["decile"] == decile)]
        return float(row["mean"].iloc[0])


def compare_lists(
    list_a: TargetList,
    list_b: TargetList,
    realized,
    realized_definition: str = "client-supplied realized effect (not a causal estimate)",
) -> DecileComparison:
    """Mean realized value per decile for each of two lists over the same population.

    ``realized`` maps unit id to value (Series indexed by id, or dict).
    """
    a_ids, b_ids = set(list_a.unit_ids.tolist()), set(list_b.unit_ids.tolist())
    if a_ids != b_ids:
        raise EvaluationError(f"lists rank different populations ({len(a_ids ^ b_ids)} ids differ)")
    if list_a.label == list_b.label:
        raise EvaluationError("the two lists need distinct labels")
    realized = pd.Series(realized, dtype=float) if not isinstance(realized, pd.Series) else realized
    realized.index = realized.index.astype(str)
    missing = a_ids - set(realized.index)
    if missing:
        raise EvaluationError(f"{len(missing)} listed units have no realized value")
    rows = []
    for tl in (list_a, list_b):
        vals = realized.loc[tl.unit_ids.astype(str)].to_numpy()
        frame = pd.DataFrame({"decile": tl.deciles, "v": vals})
        g = frame.groupby("decile")["v"].agg(["size", "mean"])
        for dec in sorted(g.index, reverse=True):
            rows.append((tl.label, int(dec), int(g.loc[dec, "size"]), float(g.loc[dec, "mean"])))
    table = pd.DataFrame(rows, columns=["list", "decile", "n", "mean"])
    return DecileComparison(table, realized_definition)


def comparison_json(cmp: DecileComparison) -> str:
    return json.dumps({"realized_definition": cmp.realized_definition}, indent=2) + "\n"
