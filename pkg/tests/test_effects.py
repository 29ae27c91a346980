import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from psclone.dataset import release_escrow
from psclone.effects import (
    TargetList,
    aggregate,
    build_target_list,
    compare_lists,
    decile_labels,
    rank_units,
    unit_effects,
)
from psclone.errors import EmptySelectionError, EscrowViolation, EvaluationError
from psclone.matching import MatchSpec, match

from conftest import frozen_design, lp_dataset


def effects_for(t_lp, c_lp, y_t, y_c, **spec):
    ds, sc = lp_dataset(t_lp, c_lp, y_t, y_c)
    design = frozen_design(ds, sc, trim=None)
    ms = match(sc, design, MatchSpec(**(dict(k=1, caliper=None) | spec)))
    return ds, design, ms


def test_effect_signs():
    # Doctor A: treated 15, clone 15 -> 0. Doctor B: treated 5, clone 1 -> 4. Control 1, treated clone 5 -> 4.
    ds, design, ms = effects_for([0.0, 5.0], [0.0, 5.0], [15, 5], [15, 1])
    with pytest.raises(EscrowViolation):
        unit_effects(ms, ds)
    eff = unit_effects(ms, release_escrow(ds, design)).set_index("unit_id")
    assert eff.loc["t0", "tau_hat"] == 0
    assert eff.loc["t1", "tau_hat"] == 4
    assert eff.loc["c1", "tau_hat"] == 4 and eff.loc["c1", "z"] == 0
    assert eff.loc["c0", "tau_hat"] == 0


def test_decomposition_identity(rng):
    t, c = rng.normal(0.3, 1, 30).round(2), rng.normal(0, 1, 50).round(2)
    yt, yc = rng.normal(5, 2, 30), rng.normal(3, 2, 50)
    ds, design, ms = effects_for(list(t), list(c), list(yt), list(yc), k=3, caliper="auto")
    rel = release_escrow(ds, design)
    eff = unit_effects(ms, rel)
    y = dict(zip(ds.unit_ids, rel.outcome))
    tr = ms.pairs[ms.pairs.focal_z == 1]
    k_prime = tr.groupby("focal_id")["clone_id"].transform("size")
    weighted_clone = (tr["clone_id"].map(y) / k_prime).sum() / tr["focal_id"].nunique()
    observed = np.mean([y[f] for f in tr["focal_id"].unique()])
    assert eff.loc[eff.z == 1, "tau_hat"].mean() == pytest.approx(observed - weighted_clone)


def test_permutation_safety(rng):
    t, c = rng.normal(0.3, 1, 20).round(2), rng.normal(0, 1, 30).round(2)
    yt, yc = rng.normal(5, 2, 20), rng.normal(3, 2, 30)
    ds, design, ms = effects_for(list(t), list(c), list(yt), list(yc), k=2)
    a = unit_effects(ms, release_escrow(ds, design))
    perm = rng.permutation(len(t))
    ds2, design2, ms2 = effects_for(list(t[perm]), list(c), list(yt[perm]), list(yc), k=2)
    b = unit_effects(ms2, release_escrow(ds2, design2))
    rename = {f"t{i}": f"t{p}" for i, p in enumerate(perm)}
    b["unit_id"] = b["unit_id"].map(lambda u: rename.get(u, u))
    sa = a.set_index("unit_id")["tau_hat"].sort_index()
    sb = b.set_index("unit_id")["tau_hat"].sort_index()
    pd.testing.assert_series_equal(sa, sb)


def eff_table(values, z=None):
    z = [1] * len(values) if z is None else z
    return pd.DataFrame({"unit_id": [f"u{i}" for i in range(len(values))], "z": z, "tau_hat": values})


def test_aggregate():
    a = aggregate(eff_table([3.0, 3.0, 3.0]))
    assert a.mean == 3 and a.sd == 0 and a.count == 3
    a = aggregate(eff_table([0.0, 4.0]))
    assert a.mean == 2 and a.sd == pytest.approx(2.8284271247)
    e = eff_table([1.0, 2.0, 6.0, 9.0], z=[1, 0, 1, 0])
    assert aggregate(e, e.z == 1).mean == pytest.approx(e[e.z == 1].tau_hat.mean())
    assert aggregate(e, ["u1", "u3"]).mean == 5.5
    assert aggregate(e, lambda f: f.tau_hat > 5).count == 2
    with pytest.raises(EmptySelectionError):
        aggregate(e, lambda f: f.tau_hat > 100)


def test_target_list_order_and_deciles():
    tl = build_target_list(pd.DataFrame({"unit_id": ["A", "B", "C", "T"], "z": [0, 0, 0, 1], "tau_hat": [4, 0, -1, 9]}))
    assert tl.unit_ids.tolist() == ["A", "B", "C"]
    assert tl.metadata["collapsed"] and tl.deciles.tolist() == [10, 9, 8]

    vals = np.random.default_rng(3).permutation(100).astype(float)
    tl = rank_units([f"u{i:03d}" for i in range(100)], vals)
    top = {f"u{i:03d}" for i in np.argsort(-vals)[:10]}
    assert set(tl.unit_ids[tl.deciles == 10]) == top
    assert np.bincount(tl.deciles)[1:].tolist() == [10] * 10


def test_ties_at_boundary_follow_unit_id():
    ids = [f"u{i:02d}" for i in range(20)][::-1]
    tl = rank_units(ids, [1.0] * 20)
    assert tl.unit_ids.tolist() == sorted(ids)
    assert tl.deciles.tolist() == [10, 10, 9, 9, 8, 8, 7, 7, 6, 6, 5, 5, 4, 4, 3, 3, 2, 2, 1, 1]
    assert rank_units(ids, [1.0] * 20).unit_ids.tolist() == tl.unit_ids.tolist()


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 10**6))
def test_decile_sizes_and_monotone_invariance(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n)
    ids = [f"u{i}" for i in range(n)]
    tl = rank_units(ids, s)
    sizes = np.bincount(tl.deciles, minlength=11)[11 - min(10, n):]
    assert sizes.max() - sizes.min() <= 1 and sizes.sum() == n
    assert sorted(tl.unit_ids) == sorted(ids)
    assert rank_units(ids, np.exp(s) * 3 + 1).unit_ids.tolist() == tl.unit_ids.tolist()


def test_compare_lists_hand_tally():
    ids = [f"u{i:02d}" for i in range(20)]
    a = rank_units(ids, np.arange(20, 0, -1), "a")            # u00 top
    b = rank_units(ids, np.arange(1, 21), "b")                # u19 top
    realized = {u: float(i) for i, u in enumerate(ids)}       # u_i -> i
    cmp = compare_lists(a, b, realized)
    assert cmp.mean("a", 10) == 0.5 and cmp.mean("a", 1) == 18.5
    assert cmp.mean("b", 10) == 18.5 and cmp.mean("b", 5) == 8.5
    assert cmp.table.groupby("list")["n"].sum().tolist() == [20, 20]
    assert list(cmp.plot_data().columns) == ["decile", "list", "mean"]

    same = compare_lists(a, TargetList(a.unit_ids, a.scores, a.deciles, "copy"), realized)
    assert same.table[same.table.list == "a"]["mean"].tolist() == same.table[same.table.list == "copy"]["mean"].tolist()

    with pytest.raises(EvaluationError):
        compare_lists(a, rank_units(ids[:-1], np.arange(19), "c"), realized)
    with pytest.raises(EvaluationError):
        compare_lists(a, b, {u: 0.0 for u in ids[:5]})


def test_decile_labels():
    assert decile_labels(0).tolist() == []
    assert decile_labels(10).tolist() == list(range(10, 0, -1))
