import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from psclone.design import (
    BalanceReport,
    assign_bins,
    balance_report,
    freeze_design,
    standardized_difference,
    trim_support,
)
from psclone.errors import BinningError, DesignNotReady, ProvenanceError, SupportError
from psclone.propensity import ScoreTable, fit_propensity

from conftest import frame_dataset, lp_dataset


def table(lp, z=None):
    n = len(lp)
    z = [i % 2 for i in range(n)] if z is None else z
    return ScoreTable.from_linear([f"u{i:02d}" for i in range(n)], z, np.asarray(lp, float))


def test_quantile_bins_of_two():
    plan = assign_bins(table(np.arange(1, 11)), 5)
    assert plan.counts().tolist() == [2] * 5
    assert plan.bins.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_all_equal_single_bin():
    plan = assign_bins(table([0.7] * 6), 1)
    assert plan.counts().tolist() == [6]
    with pytest.raises(BinningError, match="fewer bins"):
        assign_bins(table([0.7] * 6), 2)


def test_probability_bin_on_lp_scale(rng):
    e = rng.uniform(0.01, 0.99, size=500)
    e[:4] = [0.5, 0.6, 0.4999, 0.6001]
    sc = ScoreTable.from_probabilities([f"u{i}" for i in range(500)], rng.integers(0, 2, 500), e)
    edges = [sc.lp.min(), logit(0.5), logit(0.6) + 1e-12, sc.lp.max()]
    plan = assign_bins(sc, edges=edges)
    inside = plan.bins == 1
    assert np.array_equal(inside, (e >= 0.5) & (e <= 0.6))


def test_ties_share_bin():
    lp = [1, 2, 2, 2, 3, 4, 5, 6]
    plan = assign_bins(table(lp), 3)
    b = dict(zip(lp, plan.bins))
    assert len({plan.bins[i] for i in (1, 2, 3)}) == 1
    assert b[1] <= b[2] <= b[6]


@settings(max_examples=60, deadline=None)
@given(n=st.integers(10, 200), k=st.integers(1, 10), seed=st.integers(0, 10**6))
def test_quantile_counts_differ_by_at_most_one(n, k, seed):
    lp = np.random.default_rng(seed).normal(size=n)
    plan = assign_bins(table(lp), k)
    c = plan.counts()
    assert c.sum() == n and c.max() - c.min() <= 1
    lo, hi = plan.edges[plan.bins], plan.edges[plan.bins + 1]
    assert np.all(lo <= lp) and np.all(lp <= hi)


def test_smd_hand_case():
    assert standardized_difference(np.array([2.0, 4.0]), np.array([1.0, 3.0])) == pytest.approx(1 / math.sqrt(2))
    ds, sc = lp_dataset([2.0, 4.0], [1.0, 3.0])
    rep = balance_report(ds, assign_bins(sc, 1))
    assert rep.table["smd"].iloc[0] == pytest.approx(0.70710678, abs=1e-8)
    assert not rep.balanced


def test_identical_arms_balanced():
    ds, sc = lp_dataset([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
    rep = balance_report(ds, assign_bins(sc, 2))
    assert np.all(rep.table["smd"] == 0) and rep.balanced and rep.worst_abs_smd == 0


def test_empty_arm_bin_flagged():
    ds, sc = lp_dataset([1.0, 1.1, 5.0, 5.1], [5.0, 5.2, 5.3, 5.4])
    rep = balance_report(ds, assign_bins(sc, edges=[1.0, 3.0, 5.4]))
    assert rep.flagged_bins == [0] and rep.warnings
    assert rep.table.loc[rep.table["bin"] == 0, "smd"].isna().all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(0.01, 1000))
def test_smd_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    t, ctl = rng.normal(1, 2, 7), rng.normal(0, 1, 9)
    assert standardized_difference(c * t, c * ctl) == pytest.approx(standardized_difference(t, ctl), rel=1e-9)


def test_arm_overlap_hand_case():
    sc = ScoreTable.from_linear(["t1", "t2", "t3", "c2", "c3", "c4"], [1, 1, 1, 0, 0, 0], [1, 2, 3, 2, 3, 4.0])
    tr = trim_support(sc)
    assert tr.support == (2.0, 3.0)
    assert tr.dropped["unit_id"].tolist() == ["t1", "c4"]
    assert tr.dropped["reason"].tolist() == ["below-support", "above-support"]
    assert sorted(tr.retained) == ["c2", "c3", "t2", "t3"]


def test_identical_ranges_drop_nothing():
    sc = ScoreTable.from_linear(["a", "b", "c", "d"], [1, 1, 0, 0], [0.0, 1.0, 0.0, 1.0])
    assert len(trim_support(sc).dropped) == 0


def test_lp_window():
    ids = ["c_lo", "c_mid", "t_mid", "t_hi", "c_mid2", "t_mid2"]
    sc = ScoreTable.from_linear(ids, [0, 0, 1, 1, 0, 1], [0.05, 0.5, 0.6, 1.4, 0.1, 1.0])
    tr = trim_support(sc, ("lp-window", 0.1, 1.0))
    assert tr.dropped["unit_id"].tolist() == ["c_lo", "t_hi"]
    with pytest.raises(SupportError):
        trim_support(sc, ("lp-window", 1.2, 2.0))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(-2, 0), b=st.floats(0, 2), wa=st.floats(0, 1), wb=st.floats(0, 1))
def test_widening_window_keeps_units(seed, a, b, wa, wb):
    rng = np.random.default_rng(seed)
    n = 50
    sc = ScoreTable.from_linear([f"u{i}" for i in range(n)], np.arange(n) % 2, rng.normal(size=n) * 2)
    try:
        narrow = trim_support(sc, ("lp-window", a, b))
    except SupportError:
        return
    wide = trim_support(sc, ("lp-window", a - wa, b + wb))
    assert set(narrow.retained) <= set(wide.retained)


def freeze_inputs(lp_t, lp_c):
    ds, sc = lp_dataset(lp_t, lp_c)
    tr = trim_support(sc)
    plan = assign_bins(sc, 1, retained=tr)
    return fit_propensity(ds), plan, balance_report(ds, plan), tr


def test_freeze_balanced_and_override():
    model, plan, bal, tr = freeze_inputs([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    d = freeze_design(model, plan, bal, tr)
    assert d.frozen and not d.override

    unbalanced = BalanceReport(bal.table, bal.overall, 0.1, 0.4, False, [], bal.dataset_digest)
    with pytest.raises(DesignNotReady):
        freeze_design(model, plan, unbalanced, tr)
    d = freeze_design(model, plan, unbalanced, tr, override=True)
    assert d.frozen and d.override and d.to_dict()["override"] is True

    stranger = BalanceReport(bal.table, bal.overall, 0.1, 0.0, True, [], "other")
    with pytest.raises(ProvenanceError):
        freeze_design(model, plan, stranger, tr)


def test_within_bin_smd_below_unbinned_for_confounder():
    from psclone import simulate as sim

    s = sim.generate(sim.preset("doctors", n=20_000, seed=4))
    ds = s.dataset()
    sc = ScoreTable.from_probabilities(ds.unit_ids, ds.z, s.truth["e_true"].to_numpy(), ds.provenance)
    rep = balance_report(ds, assign_bins(sc, 10))
    overall = abs(rep.overall.set_index("covariate").loc["scripts_t1", "smd"])
    within = rep.table[(rep.table.covariate == "scripts_t1") & (rep.table.n_treated >= 50) & (rep.table.n_control >= 50)]
    assert len(within) >= 8
    assert (within["smd"].abs() < overall).all()
    assert ds.escrow
