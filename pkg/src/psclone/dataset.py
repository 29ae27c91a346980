"""Loading, encoding and escrow of unit-level observational data.

Outcomes are parsed at load time but kept sealed: every accessor that would
expose them raises :class:`~psclone.errors.EscrowViolation` until
:func:`release_escrow` is called with a frozen design built on the same file.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import EscrowViolation, ProvenanceError, SchemaError, ValidationError

NUMERIC = "numeric"
CATEGORICAL = "categorical"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_json(obj) -> str:
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


@dataclass(frozen=True)
class CovariateSchema:
    """Names and kinds of the background covariates.

    ``levels`` maps categorical columns to their level set. Levels left
    undeclared are inferred from the data at load time. Each categorical
    column with L levels expands to L-1 indicator columns; the reference
    level is the first in sorted order.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise SchemaError("names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("duplicate covariate names")
        for kind in self.kinds:
            if kind not in (NUMERIC, CATEGORICAL):
                raise SchemaError(f"unknown covariate kind {kind!r}")
        for name in self.levels:
            if name not in self.names or self.kind(name) != CATEGORICAL:
                raise SchemaError(f"levels given for non-categorical column {name!r}")
        sorted_levels = {k: tuple(sorted(set(map(str, v)))) for k, v in self.levels.items()}
        object.__setattr__(self, "levels", sorted_levels)

    @classmethod
    def build(cls, numeric: Sequence[str] = (), categorical=()) -> "CovariateSchema":
        """Numeric columns first, then categoricals (a list of names or a name->levels map)."""
        if isinstance(categorical, Mapping):
            cat_names = list(categorical)
            levels = {k: tuple(v) for k, v in categorical.items() if v}
        else:
            cat_names = list(categorical)
            levels = {}
        names = tuple(numeric) + tuple(cat_names)
        kinds = (NUMERIC,) * len(numeric) + (CATEGORICAL,) * len(cat_names)
        return cls(names, kinds, levels)

    def kind(self, name: str) -> str:
        try:
            return self.kinds[self.names.index(name)]
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None

    @property
    def resolved(self) -> bool:
        return all(n in self.levels for n, k in zip(self.names, self.kinds) if k == CATEGORICAL)

    def encoded_names(self) -> list[str]:
        if not self.resolved:
            raise SchemaError("categorical levels not resolved; load data first")
        out = []
        for name, kind in zip(self.names, self.kinds):
            if kind == NUMERIC:
                out.append(name)
            else:
                out.extend(f"{name}={lvl}" for lvl in self.levels[name][1:])
        return out

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "kinds": list(self.kinds),
            "levels": {k: list(v) for k, v in sorted(self.levels.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CovariateSchema":
        return cls(tuple(d["names"]), tuple(d["kinds"]), {k: tuple(v) for k, v in d.get("levels", {}).items()})

    def digest(self) -> str:
        return sha256_json(self.to_dict())


def encode(frame: pd.DataFrame, schema: CovariateSchema) -> np.ndarray:
    """Encode raw covariate columns into a float matrix laid out as ``schema.encoded_names()``."""
    cols = []
    for name, kind in zip(schema.names, schema.kinds):
        if kind == NUMERIC:
            cols.append(frame[name].to_numpy(dtype=float))
        else:
            values = frame[name].astype(str).to_numpy()
            for lvl in schema.levels[name][1:]:
                cols.append((values == lvl).astype(float))
    if not cols:
        return np.empty((len(frame), 0))
    return np.column_stack(cols)


def decode_categorical(schema: CovariateSchema, X: np.ndarray, column: str) -> np.ndarray:
    """Recover level labels of a categorical column from its indicator block."""
    if schema.kind(column) != CATEGORICAL:
        raise SchemaError(f"{column!r} is not categorical")
    names = schema.encoded_names()
    levels = schema.levels[column]
    idx = [names.index(f"{column}={lvl}") for lvl in levels[1:]]
    block = X[:, idx]
    out = np.full(X.shape[0], levels[0], dtype=object)
    rows, cols = np.nonzero(block)
    out[rows] = np.asarray(levels[1:], dtype=object)[cols]
    return out


class _Sealed:
    """Opaque holder that refuses to reveal its contents through the usual protocols."""

    __slots__ = ("_v",)

    def __init__(self, values: np.ndarray):
        self._v = values

    def __repr__(self):
        return "<sealed outcome>"

    def __reduce__(self):
        raise EscrowViolation("sealed outcomes cannot be serialized")


class Dataset:
    """Immutable table of units with encoded covariates, treatment flags and escrowed outcomes."""

    def __init__(
        self,
        schema: CovariateSchema,
        unit_ids: np.ndarray,
        covariates: pd.DataFrame,
        X: np.ndarray,
        z: np.ndarray,
        outcome: np.ndarray,
        provenance: str,
        rejections: pd.DataFrame,
        escrow: bool = True,
        audit: tuple = (),
    ):
        for arr in (unit_ids, X, z, outcome):
            arr.setflags(write=False)
        self._schema = schema
        self._ids = unit_ids
        self._covariates = covariates
        self._X = X
        self._z = z
        self._sealed = _Sealed(outcome)
        self._provenance = provenance
        self._rejections = rejections
        self._escrow = escrow
        self._audit = tuple(audit)
        self._index = None

    def __setattr__(self, name, value):
        if name != "_index" and hasattr(self, "_audit"):
            raise AttributeError("Dataset is immutable")
        object.__setattr__(self, name, value)

    def __repr__(self):
        state = "sealed" if self._escrow else "released"
        return f"<Dataset n={len(self)} treated={int(self._z.sum())} escrow={state} {self._provenance[:12]}>"

    def __len__(self):
        return len(self._ids)

    @property
    def schema(self) -> CovariateSchema:
        return self._schema

    @property
    def unit_ids(self) -> np.ndarray:
        return self._ids

    @property
    def X(self) -> np.ndarray:
        return self._X

    @property
    def z(self) -> np.ndarray:
        return self._z

    @property
    def provenance(self) -> str:
        return self._provenance

    @property
    def escrow(self) -> bool:
        return self._escrow

    @property
    def rejections(self) -> pd.DataFrame:
        return self._rejections.copy()

    @property
    def audit(self) -> tuple:
        return self._audit

    @property
    def released_under(self) -> str | None:
        for entry in reversed(self._audit):
            if entry.get("event") == "escrow-released":
                return entry["design_digest"]
        return None

    @property
    def outcome(self) -> np.ndarray:
        if self._escrow:
            raise EscrowViolation("outcome is held in escrow until a frozen design releases it")
        return self._sealed._v

    def covariate_frame(self) -> pd.DataFrame:
        """Raw (decoded) covariate values, one row per unit, indexed by unit id."""
        return self._covariates.copy()

    def positions(self, ids) -> np.ndarray:
        """Row positions of the given unit ids."""
        if self._index is None:
            object.__setattr__(self, "_index", pd.Index(self._ids))
        pos = self._index.get_indexer(np.asarray(ids, dtype=object))
        if (pos < 0).any():
            raise ValidationError("unknown unit id(s) requested")
        return pos

    def encoded_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._X, index=pd.Index(self._ids, name="unit_id"), columns=self._schema.encoded_names())

    def _released(self, design_digest: str) -> "Dataset":
        entry = {"event": "escrow-released", "design_digest": design_digest}
        return Dataset(
            self._schema, self._ids, self._covariates, self._X, self._z, self._sealed._v,
            self._provenance, self._rejections, escrow=False, audit=self._audit + (entry,),
        )

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        schema: CovariateSchema,
        outcome_column: str,
        treatment_column: str,
        id_column: str | None = "unit_id",
        provenance: str | None = None,
    ) -> "Dataset":
        """Build a dataset from an in-memory table of strings or numbers.

        Cells that are empty strings or NaN count as missing; rows with any
        missing value are dropped and listed in ``rejections``.
        """
        if provenance is None:
            provenance = sha256_bytes(frame.to_csv(index=False).encode("utf-8"))
        return _build(frame, schema, outcome_column, treatment_column, id_column, provenance)


def _is_missing(col: pd.Series) -> np.ndarray:
    s = col.astype(object)
    return (s.isna() | (s.astype(str).str.strip() == "")).to_numpy()


def _parse_numeric(col: pd.Series, name: str, positions: np.ndarray) -> np.ndarray:
    parsed = pd.to_numeric(col, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(parsed)
    if bad.any():
        row = int(positions[np.argmax(bad)])
        raise ValidationError(f"row {row}: column {name!r} value {col.iloc[int(np.argmax(bad))]!r} is not a finite number")
    return parsed


def _build(frame, schema, outcome_column, treatment_column, id_column, provenance) -> Dataset:
    required = list(schema.names) + [outcome_column, treatment_column]
    if id_column is not None:
        required.append(id_column)
    missing_cols = [c for c in required if c not in frame.columns]
    if missing_cols:
        raise SchemaError(f"missing column(s): {', '.join(missing_cols)}")

    n = len(frame)
    frame = frame.reset_index(drop=True)
    if id_column is None:
        width = max(1, len(str(max(n - 1, 0))))
        ids = pd.Series([f"{i:0{width}d}" for i in range(n)], dtype=object)
    else:
        ids = frame[id_column]

    # Treatment values are validated on every row that has one, before any rejection.
    z_raw = frame[treatment_column]
    z_missing = _is_missing(z_raw)
    zf = pd.to_numeric(z_raw.where(~z_missing, "0"), errors="coerce").to_numpy(dtype=float)
    bad = ~np.isin(zf, (0.0, 1.0))
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(f"row {i}: treatment value {str(z_raw.iloc[i]).strip()!r} is not 0 or 1")
    z = zf.astype(np.int8)

    reasons: list[tuple[int, str]] = []
    keep = np.ones(n, dtype=bool)
    checks = [(treatment_column, z_missing)]
    if id_column is not None:
        checks.append((id_column, _is_missing(ids)))
    checks += [(c, _is_missing(frame[c])) for c in list(schema.names) + [outcome_column]]
    for name, miss in checks:
        for i in np.flatnonzero(miss & keep):
            reasons.append((int(i), f"missing value in column {name!r}"))
        keep &= ~miss
    rejections = pd.DataFrame(sorted(reasons), columns=["row_index", "reason"])

    rows = np.flatnonzero(keep)
    kept = frame.iloc[rows].reset_index(drop=True)
    unit_ids = ids.iloc[rows].astype(str).str.strip().to_numpy(dtype=object)
    if len(set(unit_ids)) != len(unit_ids):
        dup = pd.Series(unit_ids).duplicated()
        raise ValidationError(f"row {int(rows[np.argmax(dup.to_numpy())])}: duplicate unit id {unit_ids[dup.to_numpy()][0]!r}")

    levels = dict(schema.levels)
    raw = {}
    for name, kind in zip(schema.names, schema.kinds):
        col = kept[name]
        if kind == NUMERIC:
            raw[name] = _parse_numeric(col, name, rows)
        else:
            values = col.astype(str).str.strip()
            seen = set(values)
            if name in levels:
                unknown = sorted(seen - set(levels[name]))
                if unknown:
                    i = int(rows[np.argmax(values.isin(unknown).to_numpy())])
                    raise ValidationError(f"row {i}: level {unknown[0]!r} not declared for {name!r}")
            else:
                levels[name] = tuple(sorted(seen))
            raw[name] = values.to_numpy(dtype=object)
    resolved = CovariateSchema(schema.names, schema.kinds, levels)
    covariates = pd.DataFrame(raw, index=pd.Index(unit_ids, name="unit_id"))
    X = np.ascontiguousarray(encode(covariates, resolved), dtype=float)
    y = _parse_numeric(kept[outcome_column], outcome_column, rows)
    zk = z[rows]
    if zk.min(initial=1) != 0 or zk.max(initial=0) != 1:
        raise ValidationError("dataset needs at least one treated and one control unit")
    return Dataset(resolved, unit_ids, covariates, X, zk, y, provenance, rejections)


def load_dataset(
    path,
    schema: CovariateSchema,
    outcome_column: str,
    treatment_column: str,
    id_column: str | None = "unit_id",
) -> Dataset:
    """Read a comma separated file with a header row into a sealed :class:`Dataset`.

    The provenance digest is the SHA-256 of the raw file bytes.
    """
    data = Path(path).read_bytes()
    frame = pd.read_csv(io.BytesIO(data), dtype=str, keep_default_na=False, na_values=[], encoding="utf-8")
    return _build(frame, schema, outcome_column, treatment_column, id_column, sha256_bytes(data))


def release_escrow(ds: Dataset, design) -> Dataset:
    """Unseal outcomes under a frozen design built on this dataset.

    The returned dataset carries an audit entry naming the design digest.
    """
    if not getattr(design, "frozen", False):
        raise EscrowViolation("escrow can only be released under a frozen design")
    if design.dataset_digest != ds.provenance:
        raise ProvenanceError("design was built on a different dataset")
    return ds._released(design.digest())


@dataclass
class HistogramSummary:
    column: str
    group: str
    n: int
    mean: float
    sd: float
    edges: np.ndarray | None = None
    counts: np.ndarray | None = None
    levels: tuple[str, ...] | None = None


def _group_mask(z: np.ndarray, group: str) -> np.ndarray:
    if group == "all":
        return np.ones(len(z), dtype=bool)
    if group == "treated":
        return z == 1
    if group == "control":
        return z == 0
    raise ValueError(f"group must be treated, control or all, not {group!r}")


def sample_sd(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def summarize_covariate(ds: Dataset, column: str, group: str = "all", bins="auto") -> HistogramSummary:
    """Histogram, mean and sample sd of one raw covariate within a treatment group.

    Categorical columns give per-level counts; mean and sd then describe the
    level index and are left as NaN.
    """
    kind = ds.schema.kind(column)
    mask = _group_mask(ds.z, group)
    values = ds._covariates[column].to_numpy()[mask]
    if kind == CATEGORICAL:
        levels = ds.schema.levels[column]
        counts = np.array([(values == lvl).sum() for lvl in levels])
        return HistogramSummary(column, group, int(mask.sum()), math.nan, math.nan, counts=counts, levels=levels)
    values = values.astype(float)
    if len(values) == 0:
        return HistogramSummary(column, group, 0, math.nan, math.nan, np.array([]), np.array([], dtype=int))
    lo, hi = values.min(), values.max()
    if lo == hi:
        edges = np.array([lo - 0.5, hi + 0.5])
        counts = np.array([len(values)])
    else:
        counts, edges = np.histogram(values, bins=bins)
    return HistogramSummary(column, group, len(values), float(values.mean()), sample_sd(values), edges, counts)
