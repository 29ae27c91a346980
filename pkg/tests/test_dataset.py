import hashlib

import numpy as np
import pandas as pd
import pytest

from psclone.dataset import (
    CovariateSchema,
    load_dataset,
    release_escrow,
    summarize_covariate,
)
from psclone.errors import EscrowViolation, ProvenanceError, SchemaError, ValidationError

from conftest import frame_dataset, frozen_design, lp_dataset

FOUR_ROWS = """unit_id,scripts_t1,specialty,z,y
A,10,GP,1,15
B,1,IM,1,5
C,10,GP,0,15
D,1,IM,0,1
"""


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_four_row_load_is_sealed(tmp_path):
    schema = CovariateSchema.build(["scripts_t1"], ["specialty"])
    ds = load_dataset(write(tmp_path, FOUR_ROWS), schema, "y", "z")
    assert len(ds) == 4
    assert ds.z.tolist() == [1, 1, 0, 0]
    assert ds.escrow
    assert ds.provenance == hashlib.sha256(FOUR_ROWS.encode()).hexdigest()
    assert ds.schema.levels["specialty"] == ("GP", "IM")
    assert ds.schema.encoded_names() == ["scripts_t1", "specialty=IM"]
    with pytest.raises(EscrowViolation):
        ds.outcome


def test_non_binary_treatment_names_row(tmp_path):
    lines = ["unit_id,x,z,y"] + [f"u{i},{i},{i % 2},1" for i in range(10)]
    lines[1 + 7] = "u7,7,2,1"
    with pytest.raises(ValidationError, match="row 7"):
        load_dataset(write(tmp_path, "\n".join(lines) + "\n"), CovariateSchema.build(["x"]), "y", "z")


def test_missing_column(tmp_path):
    with pytest.raises(SchemaError, match="age"):
        load_dataset(write(tmp_path, FOUR_ROWS), CovariateSchema.build(["age"]), "y", "z")


def test_complete_case_rejection(tmp_path):
    text = "unit_id,x,z,y\na,1,1,2\nb,,0,3\nc,2,0,\nd,3,1,4\ne,4,0,5\n"
    ds = load_dataset(write(tmp_path, text), CovariateSchema.build(["x"]), "y", "z")
    assert ds.unit_ids.tolist() == ["a", "d", "e"]
    assert ds.rejections["row_index"].tolist() == [1, 2]
    assert "'x'" in ds.rejections["reason"][0] and "'y'" in ds.rejections["reason"][1]


def test_duplicate_ids_and_single_arm():
    with pytest.raises(ValidationError, match="duplicate"):
        frame_dataset([{"unit_id": "a", "x": 1, "z": 1, "y": 0}, {"unit_id": "a", "x": 2, "z": 0, "y": 0}])
    with pytest.raises(ValidationError, match="treated"):
        frame_dataset([{"unit_id": "a", "x": 1, "z": 1, "y": 0}, {"unit_id": "b", "x": 2, "z": 1, "y": 0}])


def test_undeclared_level():
    schema = CovariateSchema.build([], {"s": ["GP"]})
    frame = pd.DataFrame({"unit_id": ["a", "b"], "s": ["GP", "XX"], "z": ["1", "0"], "y": ["1", "2"]})
    with pytest.raises(ValidationError, match="XX"):
        from psclone.dataset import Dataset
        Dataset.from_frame(frame, schema, "y", "z")


def test_dataset_is_immutable():
    ds = frame_dataset([{"unit_id": "a", "x": 1, "z": 1, "y": 0}, {"unit_id": "b", "x": 2, "z": 0, "y": 0}])
    with pytest.raises(AttributeError):
        ds._escrow = False
    with pytest.raises(ValueError):
        ds.z[0] = 0
    with pytest.raises(ValueError):
        ds.X[0, 0] = 5.0


def test_release_requires_frozen_matching_design():
    ds, sc = lp_dataset([1.0, 2.0, 3.0], [1.5, 2.5, 3.5], y_t=[1, 2, 3], y_c=[4, 5, 6])
    design = frozen_design(ds, sc)
    rel = release_escrow(ds, design)
    assert not rel.escrow and ds.escrow
    assert rel.outcome.tolist() == [1, 2, 3, 4, 5, 6]
    assert rel.audit[-1]["design_digest"] == design.digest()

    other, osc = lp_dataset([1.0, 2.0, 3.0], [1.5, 2.5, 9.0])
    with pytest.raises(ProvenanceError):
        release_escrow(other, design)
    unfrozen = type(design)(**{**design.__dict__, "frozen": False})
    with pytest.raises(EscrowViolation):
        release_escrow(ds, unfrozen)


def test_summarize_constant_and_groups():
    rows = [{"unit_id": f"u{i}", "x": 3, "z": i % 2, "y": 0} for i in range(6)]
    s = summarize_covariate(frame_dataset(rows), "x")
    assert s.counts.tolist() == [6] and s.sd == 0 and s.mean == 3

    # ten hand-built rows: treated x = 1,2,3,4 ; control x = 5..10
    rows = [{"unit_id": f"u{i}", "x": i + 1, "z": int(i < 4), "y": 0} for i in range(10)]
    ds = frame_dataset(rows)
    t = summarize_covariate(ds, "x", "treated", bins=[0, 5, 11])
    c = summarize_covariate(ds, "x", "control", bins=[0, 5, 11])
    assert t.n == 4 and c.n == 6
    assert t.counts.tolist() == [4, 0] and c.counts.tolist() == [0, 6]
    assert t.mean == 2.5 and c.mean == 7.5
    assert t.sd == pytest.approx(np.std([1, 2, 3, 4], ddof=1))
    with pytest.raises(SchemaError):
        summarize_covariate(ds, "nope")


def test_categorical_summary():
    rows = [{"unit_id": f"u{i}", "s": "AB"[i % 2], "z": int(i < 3), "y": 0} for i in range(6)]
    ds = frame_dataset(rows, numeric=(), categorical=("s",))
    s = summarize_covariate(ds, "s", "treated")
    assert s.levels == ("A", "B") and s.counts.tolist() == [2, 1]
