import numpy as np
import pandas as pd
import pytest

from psclone.dataset import CovariateSchema, Dataset
from psclone.design import assign_bins, balance_report, freeze_design, trim_support
from psclone.propensity import ScoreTable, fit_propensity


def frame_dataset(rows, numeric=("x",), categorical=(), outcome="y", treatment="z") -> Dataset:
    """Dataset from a list of dicts with string cells, as if read from a file."""
    frame = pd.DataFrame(rows).astype(str)
    return Dataset.from_frame(frame, CovariateSchema.build(numeric, categorical), outcome, treatment)


def lp_dataset(t_lp, c_lp, y_t=None, y_c=None):
    """Dataset whose covariate equals a chosen linear propensity; ids t0.., c0.."""
    rows = []
    for i, v in enumerate(t_lp):
        rows.append({"unit_id": f"t{i}", "x": v, "z": 1, "y": 0.0 if y_t is None else y_t[i]})
    for i, v in enumerate(c_lp):
        rows.append({"unit_id": f"c{i}", "x": v, "z": 0, "y": 0.0 if y_c is None else y_c[i]})
    ds = frame_dataset(rows)
    lp = ds.covariate_frame()["x"].to_numpy(dtype=float)
    scores = ScoreTable.from_linear(ds.unit_ids, ds.z, lp, ds.provenance)
    return ds, scores


def frozen_design(ds, scores, n_bins=1, trim="arm-overlap"):
    model = fit_propensity(ds)
    tr = trim_support(scores, trim) if trim else trim_support(scores, ("lp-window", -1e300, 1e300))
    plan = assign_bins(scores, n_bins, retained=tr)
    bal = balance_report(ds, plan)
    return freeze_design(model, plan, bal, tr, override=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
