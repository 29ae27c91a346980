"""Synthetic confounded populations with known unit effects, plus naive foil estimators.

Random numbers come from numpy's PCG64 bit generator. Units are generated in
fixed-size blocks, each seeded from ``SeedSequence(seed, spawn_key=(block,))``,
so output depends only on the config and seed, never on worker count.
"""

from __future__ import annotations

import copy
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import spearmanr

from .dataset import CovariateSchema, Dataset
from .errors import ConfigError, EvaluationError, SchemaError, SingularDesignError
from .effects import TargetList, rank_units

BLOCK_SIZE = 65536
RNG_NAME = "PCG64"
ID_WIDTH = 7


@dataclass
class NumericSpec:
    """``dist`` is normal (mean, sd), lognormal (meanlog, sdlog), uniform (low, high)
    or bimodal (means: [m1, m2], sd, weight of the second mode, optional
    exact_shares to fix each block's mode counts at round(weight * n))."""

    name: str
    dist: str = "normal"
    params: dict = field(default_factory=lambda: {"mean": 0.0, "sd": 1.0})


@dataclass
class CategoricalSpec:
    name: str
    levels: list
    probs: list


@dataclass
class LinearSpec:
    """``intercept + sum coef[x] * x + sum levels[c][level] + sum q * (x - center)**2``.

    ``quadratic`` maps a covariate to ``[q, center]``.
    """

    intercept: float = 0.0
    coef: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)
    quadratic: dict = field(default_factory=dict)


@dataclass
class EffectSpec:
    """Unit effect ``intercept + slope * (covariate - center)``."""

    intercept: float = 0.0
    covariate: str | None = None
    slope: float = 0.0
    center: float = 0.0


@dataclass
class DgpConfig:
    n: int
    seed: int = 0
    numeric: list = field(default_factory=list)
    categorical: list = field(default_factory=list)
    assignment: LinearSpec = field(default_factory=LinearSpec)
    baseline: LinearSpec = field(default_factory=LinearSpec)
    effect: EffectSpec = field(default_factory=EffectSpec)
    noise_sd: float = 1.0
    baseline_column: str | None = None
    name: str = "custom"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        d = copy.deepcopy(d)
        try:
            return cls(
                n=int(d["n"]),
                seed=int(d.get("seed", 0)),
                numeric=[NumericSpec(**x) for x in d.get("numeric", [])],
                categorical=[CategoricalSpec(**x) for x in d.get("categorical", [])],
                assignment=LinearSpec(**d.get("assignment", {})),
                baseline=LinearSpec(**d.get("baseline", {})),
                effect=EffectSpec(**d.get("effect", {})),
                noise_sd=float(d.get("noise_sd", 1.0)),
                baseline_column=d.get("baseline_column"),
                name=d.get("name", "custom"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid simulation config: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "DgpConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "DgpConfig":
        d = self.to_dict()
        d.update(changes)
        return DgpConfig.from_dict(d)

    def schema(self) -> CovariateSchema:
        return CovariateSchema.build(
            [s.name for s in self.numeric],
            {c.name: tuple(c.levels) for c in self.categorical},
        )

    def validate(self) -> None:
        names = [s.name for s in self.numeric] + [c.name for c in self.categorical]
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate names")
        for c in self.categorical:
            if len(c.levels) != len(c.probs) or not math.isclose(sum(c.probs), 1.0, abs_tol=1e-9):
                raise ConfigError(f"categorical {c.name!r}: probs must match levels and sum to 1")
        for s in self.numeric:
            if s.dist not in ("normal", "lognormal", "uniform", "bimodal"):
                raise ConfigError(f"unknown distribution {s.dist!r}")
        for lin in (self.assignment, self.baseline):
            for k in list(lin.coef) + list(lin.quadratic):
                if k not in [s.name for s in self.numeric]:
                    raise ConfigError(f"coefficient for unknown numeric covariate {k!r}")
            for k, lv in lin.levels.items():
                cat = next((c for c in self.categorical if c.name == k), None)
                if cat is None or not set(lv) <= set(cat.levels):
                    raise ConfigError(f"level effects for unknown categorical {k!r}")
        if self.effect.covariate is not None and self.effect.covariate not in [s.name for s in self.numeric]:
            raise ConfigError(f"effect covariate {self.effect.covariate!r} is not numeric")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")


def _draw_numeric(rng, spec: NumericSpec, n: int) -> np.ndarray:
    p = spec.params
    if spec.dist == "normal":
        return rng.normal(p["mean"], p["sd"], n)
    if spec.dist == "lognormal":
        return rng.lognormal(p["meanlog"], p["sdlog"], n)
    if spec.dist == "uniform":
        return rng.uniform(p["low"], p["high"], n)
    if p.get("exact_shares"):
        mode = np.zeros(n, dtype=bool)
        mode[rng.permutation(n)[: round(p["weight"] * n)]] = True
    else:
        mode = rng.random(n) < p["weight"]
    return np.where(mode, p["means"][1], p["means"][0]) + rng.normal(0.0, p["sd"], n)


def _linear(spec: LinearSpec, num: dict, cat: dict, n: int) -> np.ndarray:
    out = np.full(n, float(spec.intercept))
    for k, a in spec.coef.items():
        out += a * num[k]
    for k, effects in spec.levels.items():
        for lvl, a in effects.items():
            out += a * (cat[k] == lvl)
    for k, (q, center) in spec.quadratic.items():
        out += q * (num[k] - center) ** 2
    return out


def _block(cfg: DgpConfig, b: int) -> pd.DataFrame:
    start = b * BLOCK_SIZE
    n = min(BLOCK_SIZE, cfg.n - start)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(b,))))
    num = {s.name: _draw_numeric(rng, s, n) for s in cfg.numeric}
    cat = {}
    for c in cfg.categorical:
        idx = rng.choice(len(c.levels), size=n, p=c.probs)
        cat[c.name] = np.asarray(c.levels, dtype=object)[idx]
    u = rng.random(n)
    eps = rng.normal(0.0, 1.0, n) * cfg.noise_sd
    e = expit(_linear(cfg.assignment, num, cat, n))
    z = (u < e).astype(int)
    y0 = _linear(cfg.baseline, num, cat, n) + eps
    eff = cfg.effect
    tau = np.full(n, float(eff.intercept))
    if eff.covariate is not None:
        tau += eff.slope * (num[eff.covariate] - eff.center)
    y1 = y0 + tau
    frame = {"unit_id": [f"u{i:0{ID_WIDTH}d}" for i in range(start, start + n)]}
    frame.update(num)
    frame.update(cat)
    frame.update({"z": z, "y": np.where(z == 1, y1, y0), "e_true": e, "y0": y0, "y1": y1, "tau_true": y1 - y0})
    return pd.DataFrame(frame)


@dataclass
class Simulation:
    config: DgpConfig
    data: pd.DataFrame
    truth: pd.DataFrame

    @property
    def meta(self) -> dict:
        return {"rng": RNG_NAME, "seed": self.config.seed, "block_size": BLOCK_SIZE, "n": self.config.n,
                "config": self.config.to_dict()}

    def schema(self) -> CovariateSchema:
        return self.config.schema()

    def dataset(self) -> Dataset:
        """Sealed dataset whose provenance equals the digest of ``data.csv`` as written by :meth:`write`."""
        return Dataset.from_frame(self.data, self.schema(), "y", "z")

    def subsample(self, n: int, seed: int) -> "Simulation":
        """Simple random subsample of ``n`` units (PCG64 seeded by ``seed``), original order kept."""
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = np.sort(rng.choice(len(self.data), size=n, replace=False))
        cfg = self.config.replace(n=n)
        return Simulation(cfg, self.data.iloc[idx].reset_index(drop=True), self.truth.iloc[idx].reset_index(drop=True))

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.data.to_csv(out / "data.csv", index=False)
        self.truth.to_csv(out / "truth.csv", index=False)
        (out / "simulation.json").write_text(json.dumps(self.meta, indent=2) + "\n")
        (out / "schema.json").write_text(json.dumps({
            **self.schema().to_dict(), "outcome": "y", "treatment": "z", "id": "unit_id",
        }, indent=2) + "\n")
        return {"data": str(out / "data.csv"), "truth": str(out / "truth.csv")}


def generate(cfg: DgpConfig, workers: int = 1) -> Simulation:
    """Draw a population; the exported data reveal only z and the observed outcome.

    The truth table holds e_true, y0, y1 and tau_true per unit.
    """
    cfg.validate()
    n_blocks = -(-cfg.n // BLOCK_SIZE)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(lambda b: _block(cfg, b), range(n_blocks)))
    else:
        blocks = [_block(cfg, b) for b in range(n_blocks)]
    full = pd.concat(blocks, ignore_index=True)
    e = full["e_true"].to_numpy()
    if np.mean((e > 1e-3) & (e < 1 - 1e-3)) < 0.01 or full["z"].nunique() < 2:
        raise ConfigError("assignment model gives degenerate propensities (almost all near 0 or 1)")
    covs = [s.name for s in cfg.numeric] + [c.name for c in cfg.categorical]
    data = full[["unit_id", *covs, "z", "y"]].copy()
    truth = full[["unit_id", "e_true", "y0", "y1", "tau_true"]].copy()
    return Simulation(cfg, data, truth)


SPECIALTIES = ["General Practice", "Family Practice", "Internal Medicine", "Endocrinology", "OB/Gynecology", "Cardiology"]


def _doctors(n: int) -> dict:
    return {
        "name": "doctors",
        "n": n,
        "seed": 0,
        "numeric": [
            {"name": "scripts_t1", "dist": "lognormal", "params": {"meanlog": 2.0, "sdlog": 0.55}},
            {"name": "years_practice", "dist": "normal", "params": {"mean": 20.0, "sd": 8.0}},
        ],
        "categorical": [
            {"name": "specialty", "levels": SPECIALTIES, "probs": [0.25, 0.2, 0.2, 0.1, 0.15, 0.1]},
        ],
        "assignment": {
            "intercept": -2.35,
            "coef": {"scripts_t1": 0.155, "years_practice": -0.01},
            "levels": {"specialty": {"General Practice": 0.4, "Family Practice": 0.3, "Internal Medicine": 0.3,
                                     "Endocrinology": 0.4, "OB/Gynecology": -0.6}},
        },
        "baseline": {
            "intercept": 1.0,
            "coef": {"scripts_t1": 1.2, "years_practice": 0.03},
            "levels": {"specialty": {"Endocrinology": 1.0, "OB/Gynecology": -0.5}},
            "quadratic": {"scripts_t1": [0.02, 8.0]},
        },
        "effect": {"intercept": 1.2, "covariate": "scripts_t1", "slope": -0.35, "center": 8.0},
        "noise_sd": 1.0,
        "baseline_column": "scripts_t1",
    }


def _balance(n: int) -> dict:
    return {
        "name": "balance",
        "n": n,
        "seed": 0,
        "numeric": [
            {"name": "volume", "dist": "bimodal",
             "params": {"means": [0.0, 2.0], "sd": 0.05, "weight": 0.5, "exact_shares": True}},
            {"name": "tenure", "dist": "normal", "params": {"mean": 0.0, "sd": 1.0}},
        ],
        "categorical": [],
        "assignment": {"intercept": -0.5, "coef": {"volume": 0.5, "tenure": 0.02}},
        "baseline": {"intercept": 0.0, "coef": {"volume": 1.0, "tenure": 0.5}},
        "effect": {"intercept": 1.0},
        "noise_sd": 1.0,
        "baseline_column": None,
    }


def _randomized(n: int) -> dict:
    return {
        "name": "randomized",
        "n": n,
        "seed": 0,
        "numeric": [
            {"name": "x1", "dist": "normal", "params": {"mean": 0.0, "sd": 1.0}},
            {"name": "x2", "dist": "uniform", "params": {"low": 0.0, "high": 4.0}},
        ],
        "categorical": [{"name": "region", "levels": ["east", "north", "south", "west"], "probs": [0.25] * 4}],
        "assignment": {"intercept": 0.0},
        "baseline": {"intercept": 2.0, "coef": {"x1": 1.0, "x2": 0.5}, "levels": {"region": {"west": 1.0}}},
        "effect": {"intercept": 1.0, "covariate": "x1", "slope": 0.5, "center": 0.0},
        "noise_sd": 1.0,
    }


PRESETS = {
    "doctors": lambda: _doctors(250_000),
    "ferrari": lambda: _doctors(20_000) | {"name": "ferrari"},
    "balance": lambda: _balance(50_000),
    "randomized": lambda: _randomized(20_000),
}


def preset(name: str, **changes) -> DgpConfig:
    """Shipped configurations.

    doctors     250,000 units; six specialties; prior scripts heavy-tailed
                with treated mean about 1.5x control; effect falls with
                prior scripts; curved baseline so linear regression is
                misspecified and overlap is poor at the top.
    ferrari     the doctors model at 20,000 units.
    balance     a two-cluster volume confounder; used to check within-bin
                balance with true propensities.
    randomized  assignment independent of covariates.
    """
    try:
        d = PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    d.update(changes)
    return DgpConfig.from_dict(d)


def naive_before_after(ds: Dataset, baseline_column: str) -> dict:
    """Outcome minus baseline per unit, with arm means and their difference.

    The "before-after change" is a change in time, not a causal effect.
    """
    if baseline_column not in ds.schema.names or ds.schema.kind(baseline_column) != "numeric":
        raise SchemaError(f"baseline column {baseline_column!r} is not a numeric covariate")
    base = ds.covariate_frame()[baseline_column].to_numpy(dtype=float)
    change = ds.outcome - base
    z = ds.z
    treated = float(change[z == 1].mean())
    control = float(change[z == 0].mean())
    return {
        "per_unit": pd.Series(change, index=pd.Index(ds.unit_ids, name="unit_id"), name="change"),
        "treated_mean": treated,
        "control_mean": control,
        "difference": treated - control,
    }


def _ols(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise SingularDesignError("least-squares design matrix is singular (constant or collinear covariates)")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def naive_regression(ds: Dataset, truth: pd.DataFrame | None = None) -> dict:
    """Coefficient of Z in an ordinary least-squares fit of outcome on (1, covariates, Z).

    With ``truth`` the result also reports the bias against the true ATT.
    """
    A = np.column_stack([np.ones(len(ds)), ds.X, ds.z])
    coef = _ols(A, ds.outcome)
    out = {"coef_z": float(coef[-1]), "coefficients": dict(zip(["(intercept)", *ds.schema.encoded_names(), "z"], coef.tolist()))}
    if truth is not None:
        t = truth.set_index("unit_id").loc[ds.unit_ids]
        att = float(t["tau_true"].to_numpy()[ds.z == 1].mean())
        out["true_att"] = att
        out["bias"] = out["coef_z"] - att
    return out


def predictive_list(ds: Dataset, population, label: str = "predictive") -> TargetList:
    """The traditional list: units ranked by OLS-predicted outcome from covariates and Z.

    Predictions for ``population`` are made at each unit's own Z.
    """
    A = np.column_stack([np.ones(len(ds)), ds.X, ds.z])
    coef = _ols(A, ds.outcome)
    pos = ds.positions(population)
    return rank_units(ds.unit_ids[pos], A[pos] @ coef, label)


@dataclass
class RunEvaluation:
    att_hat: float
    att_true: float
    bias: float
    rmse_units: float
    rank_correlation: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_run(effects: pd.DataFrame, truth: pd.DataFrame) -> RunEvaluation:
    """Compare an effect table with the answer key.

    The ATT is averaged over treated focal rows (all rows if there are none);
    unit RMSE and Spearman correlation use every row.
    """
    t = truth.set_index(truth["unit_id"].astype(str))
    ids = effects["unit_id"].astype(str)
    missing = set(ids) - set(t.index)
    if missing:
        raise EvaluationError(f"{len(missing)} effect rows have no truth record")
    true_tau = t.loc[ids, "tau_true"].to_numpy()
    est = effects["tau_hat"].to_numpy()
    sel = effects["z"].to_numpy() == 1
    if not sel.any():
        sel = np.ones(len(est), dtype=bool)
    att_hat = float(est[sel].mean())
    att_true = float(true_tau[sel].mean())
    if len(est) > 1 and np.ptp(est) > 0 and np.ptp(true_tau) > 0:
        rho = float(spearmanr(est, true_tau).statistic)
    else:
        rho = float("nan")
    return RunEvaluation(att_hat, att_true, att_hat - att_true, float(np.sqrt(np.mean((est - true_tau) ** 2))), rho, len(est))
