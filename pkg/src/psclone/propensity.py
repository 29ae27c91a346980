"""Logistic propensity model fitted by Newton / IRLS, and propensity scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit

from .dataset import Dataset, sha256_bytes
from .errors import SchemaError, SingularDesignError

log = logging.getLogger(__name__)

E_CLAMP = 1e-12
LP_MAX = float(np.log1p(-E_CLAMP) - np.log(E_CLAMP))
LP_MIN = -LP_MAX

INTERCEPT = "(intercept)"


def log_likelihood(beta: np.ndarray, X: np.ndarray, z: np.ndarray, ridge_lambda: float = 0.0) -> float:
    """Penalised Bernoulli log-likelihood; ``beta[0]`` is the unpenalised intercept."""
    eta = beta[0] + X @ beta[1:]
    ll = np.sum(z * log_expit(eta) + (1 - z) * log_expit(-eta))
    return float(ll - 0.5 * ridge_lambda * np.dot(beta[1:], beta[1:]))


def gradient(beta: np.ndarray, X: np.ndarray, z: np.ndarray, ridge_lambda: float = 0.0) -> np.ndarray:
    eta = beta[0] + X @ beta[1:]
    r = z - expit(eta)
    g = np.empty_like(beta, dtype=float)
    g[0] = r.sum()
    g[1:] = X.T @ r - ridge_lambda * beta[1:]
    return g


@dataclass
class FitResult:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    message: str


def fit_logistic(X, z, ridge_lambda=1e-6, max_iter=50, tol=1e-8) -> FitResult:
    """Maximise :func:`log_likelihood` by damped Newton steps.

    Columns are centred and scaled internally; the ridge penalty still acts on
    the original-scale slopes. Convergence is declared when the max-norm of the
    per-unit averaged gradient (in standardised coordinates) is at most ``tol``.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    n, p = X.shape
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    center = X.mean(axis=0) if p else np.zeros(0)
    scale = X.std(axis=0) if p else np.zeros(0)
    constant = scale == 0
    center[constant] = 0.0
    scale[constant] = 1.0
    A = np.empty((n, p + 1))
    A[:, 0] = 1.0
    A[:, 1:] = (X - center) / scale
    pen = np.concatenate([[0.0], ridge_lambda / scale**2])

    if ridge_lambda == 0 and np.linalg.matrix_rank(A) < p + 1:
        cols = [str(j) for j in np.flatnonzero(constant)]
        detail = f"constant column index(es) {', '.join(cols)}" if cols else "collinear columns"
        raise SingularDesignError(f"singular design matrix ({detail}); set ridge_lambda > 0 or drop the column(s)")

    def objective(g):
        eta = A @ g
        return np.sum(z * log_expit(eta) + (1 - z) * log_expit(-eta)) - 0.5 * np.dot(pen * g, g)

    gamma = np.zeros(p + 1)
    zbar = z.mean()
    gamma[0] = np.log(zbar / (1 - zbar)) if 0 < zbar < 1 else 0.0
    obj = objective(gamma)
    converged = False
    message = "iteration limit reached"
    it = 0
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        eta = A @ gamma
        mu = expit(eta)
        grad = A.T @ (z - mu) - pen * gamma
        gnorm = float(np.max(np.abs(grad)) / n)
        if gnorm <= tol:
            converged = True
            message = "converged"
            it -= 1
            break
        w = mu * (1 - mu)
        H = (A * w[:, None]).T @ A + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            message = "Hessian became singular (likely separation)"
            break
        t = 1.0
        for _ in range(40):
            cand = gamma + t * step
            new_obj = objective(cand)
            if new_obj >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        gamma, obj = cand, new_obj
    else:
        eta = A @ gamma
        grad = A.T @ (z - expit(eta)) - pen * gamma
        gnorm = float(np.max(np.abs(grad)) / n)
        if gnorm <= tol:
            converged, message = True, "converged"

    eta = A @ gamma
    if ridge_lambda == 0 and np.all((eta > 0) == (z == 1)):
        converged = False
        message = "perfect separation: no finite maximum likelihood estimate (use ridge_lambda > 0)"
    if not converged:
        log.warning("propensity fit did not converge: %s", message)

    slopes = gamma[1:] / scale
    intercept = gamma[0] - np.dot(slopes, center)
    return FitResult(np.concatenate([[intercept], slopes]), converged, it, gnorm, message)


@dataclass
class PropensityModel:
    names: tuple[str, ...]
    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    ridge_lambda: float
    tol: float
    message: str = ""
    schema_digest: str = ""
    dataset_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "schema_digest": self.schema_digest,
            "dataset_digest": self.dataset_digest,
            "coefficients": {n: float(c) for n, c in zip(self.names, self.coefficients)},
            "coefficient_order": list(self.names),
            "ridge_lambda": self.ridge_lambda,
            "tol": self.tol,
            "converged": self.converged,
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "message": self.message,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PropensityModel":
        d = json.loads(text)
        names = tuple(d["coefficient_order"])
        return cls(
            names, np.array([d["coefficients"][n] for n in names]), d["converged"], d["iterations"],
            d["final_gradient_norm"], d["ridge_lambda"], d["tol"], d.get("message", ""),
            d["schema_digest"], d["dataset_digest"],
        )

    def digest(self) -> str:
        return sha256_bytes(self.to_json().encode())


def fit_propensity(ds: Dataset, ridge_lambda: float = 1e-6, max_iter: int = 50, tol: float = 1e-8) -> PropensityModel:
    """Fit P(Z=1|X) by (ridge-penalised) logistic maximum likelihood.

    Only covariates and treatment flags are touched, so this runs on a sealed
    dataset.
    """
    res = fit_logistic(ds.X, ds.z, ridge_lambda, max_iter, tol)
    names = (INTERCEPT,) + tuple(ds.schema.encoded_names())
    return PropensityModel(
        names, res.coefficients, res.converged, res.iterations, res.final_gradient_norm,
        float(ridge_lambda), float(tol), res.message, ds.schema.digest(), ds.provenance,
    )


@dataclass
class ScoreTable:
    """Per-unit propensity ``e`` and linear propensity ``lp = log(e / (1 - e))``."""

    unit_ids: np.ndarray
    z: np.ndarray
    e: np.ndarray
    lp: np.ndarray
    dataset_digest: str = ""
    _order: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.unit_ids)

    @classmethod
    def from_linear(cls, unit_ids, z, eta, dataset_digest="") -> "ScoreTable":
        lp = np.clip(np.asarray(eta, dtype=float), LP_MIN, LP_MAX)
        return cls(np.asarray(unit_ids, dtype=object), np.asarray(z), expit(lp), lp, dataset_digest)

    @classmethod
    def from_probabilities(cls, unit_ids, z, e, dataset_digest="") -> "ScoreTable":
        e = np.clip(np.asarray(e, dtype=float), E_CLAMP, 1 - E_CLAMP)
        return cls.from_linear(unit_ids, z, np.log(e) - np.log1p(-e), dataset_digest)

    def subset(self, ids) -> "ScoreTable":
        idx = pd.Index(self.unit_ids).get_indexer(np.asarray(ids, dtype=object))
        if (idx < 0).any():
            raise SchemaError("unit ids not present in score table")
        return ScoreTable(self.unit_ids[idx], self.z[idx], self.e[idx], self.lp[idx], self.dataset_digest)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"unit_id": self.unit_ids, "e": self.e, "lp": self.lp})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path, ds: Dataset) -> "ScoreTable":
        f = pd.read_csv(path, dtype={"unit_id": str}, float_precision="round_trip")
        pos = ds.positions(f["unit_id"])
        return cls(f["unit_id"].to_numpy(dtype=object), ds.z[pos], f["e"].to_numpy(), f["lp"].to_numpy(), ds.provenance)


def score(model: PropensityModel, ds: Dataset) -> ScoreTable:
    """Evaluate the fitted model on every unit; probabilities are clamped to [1e-12, 1-1e-12]."""
    if len(model.coefficients) != 1 + ds.X.shape[1]:
        raise SchemaError(
            f"model has {len(model.coefficients) - 1} covariate coefficients, dataset encodes {ds.X.shape[1]}"
        )
    if model.schema_digest and model.schema_digest != ds.schema.digest():
        raise SchemaError("model was fitted under a different covariate schema")
    eta = model.coefficients[0] + ds.X @ model.coefficients[1:]
    return ScoreTable.from_linear(ds.unit_ids, ds.z, eta, ds.provenance)


@dataclass
class PairedHistogram:
    edges: np.ndarray
    treated_counts: np.ndarray
    control_counts: np.ndarray
    treated_mean: float
    control_mean: float


def score_histograms(scores: ScoreTable, bins: int = 20) -> PairedHistogram:
    """Histograms of ``lp`` for each arm over one shared grid spanning the pooled range."""
    lo, hi = float(scores.lp.min()), float(scores.lp.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    t = scores.lp[scores.z == 1]
    c = scores.lp[scores.z == 0]
    tc, _ = np.histogram(t, edges)
    cc, _ = np.histogram(c, edges)
    mean = lambda a: float(a.mean()) if len(a) else float("nan")  # noqa: E731
    return PairedHistogram(edges, tc, cc, mean(t), mean(c))
