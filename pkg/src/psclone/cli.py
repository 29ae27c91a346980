"""Command line front end: one subcommand per roadmap step, all state in a run directory.

Exit codes:
  0  success
  1  unexpected error
  2  usage error
  3  missing or stale prerequisite step
  4  digest / provenance mismatch
  5  escrow violation (outcome requested before the design was frozen)
  6  design not ready (balance threshold not met, no override)
  7  invalid input, schema or configuration
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import simulate as sim
from .dataset import CovariateSchema, Dataset, load_dataset, release_escrow
from .design import BalanceReport, BinPlan, DesignReport, TrimDecision, assign_bins, balance_report, freeze_design, trim_support
from .effects import TargetList, build_target_list, compare_lists, comparison_json, unit_effects
from .errors import (
    ConfigError,
    EscrowViolation,
    PrerequisiteError,
    ProvenanceError,
    PsCloneError,
)
from .matching import MatchSet, match
from .pipeline import DEFAULTS, default_config, match_spec
from .propensity import PropensityModel, ScoreTable, fit_propensity, score

log = logging.getLogger("psclone")

PREREQS = {
    "load": [],
    "fit": ["load"],
    "trim": ["fit"],
    "bin": ["fit"],
    "balance": ["bin"],
    "freeze": ["balance", "trim"],
    "match": ["freeze"],
    "release": ["match"],
    "effects": ["release"],
    "rank": ["effects"],
    "compare": ["rank"],
    "evaluate": ["effects"],
}


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Run directory with an append-only manifest of executed steps."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"steps": []}

    def path(self, name: str) -> Path:
        return self.root / name

    def latest(self) -> dict:
        return {s["step"]: i for i, s in enumerate(self.manifest["steps"])}

    def fresh(self, step: str, latest=None) -> bool:
        latest = self.latest() if latest is None else latest
        if step not in latest:
            return False
        return all(self.fresh(p, latest) and latest[p] < latest[step] for p in PREREQS[step])

    def require(self, step: str) -> None:
        latest = self.latest()
        for p in PREREQS[step]:
            if p not in latest:
                raise PrerequisiteError(f"`{step}` needs `{p}` to run first")
            if not self.fresh(p, latest):
                raise PrerequisiteError(f"`{p}` is stale (an upstream step was rerun); rerun `{p}` before `{step}`")

    def record(self, step: str, config: dict, inputs: dict, outputs: list[str], started: str) -> None:
        self.manifest["steps"].append({
            "step": step,
            "started": started,
            "finished": _now(),
            "config": config,
            "inputs": inputs,
            "outputs": {name: _digest_file(self.path(name)) for name in outputs},
        })
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2) + "\n")

    def output_digest(self, step: str, name: str) -> str:
        for s in reversed(self.manifest["steps"]):
            if s["step"] == step:
                return s["outputs"][name]
        raise PrerequisiteError(f"`{step}` has not run")

    def check(self, step: str, *names: str) -> dict:
        """Verify artifacts on disk still match what ``step`` recorded; returns their digests."""
        out = {}
        for name in names:
            d = _digest_file(self.path(name))
            if d != self.output_digest(step, name):
                raise ProvenanceError(f"{name} changed since `{step}` wrote it")
            out[name] = d
        return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


def _config(args, run: Run) -> dict:
    cfg = default_config()
    stored = run.path("config.json")
    if stored.exists():
        cfg |= _read_json(stored)
    if getattr(args, "config", None):
        cfg |= _read_json(Path(args.config))
    flags = {
        "bins": "bins", "k": "k", "caliper": "caliper", "threshold": "threshold", "method": "method",
        "replacement": "replacement", "direction": "direction", "ridge": "ridge", "trim_window": "trim",
    }
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    if isinstance(cfg.get("caliper"), str) and cfg["caliper"] not in ("auto", "none"):
        cfg["caliper"] = float(cfg["caliper"])
    if cfg.get("caliper") == "none":
        cfg["caliper"] = None
    if isinstance(cfg.get("trim"), list):
        cfg["trim"] = tuple(cfg["trim"])
    return cfg


def _schema_from(d: dict) -> tuple[CovariateSchema, str, str, str | None]:
    if "names" in d:
        schema = CovariateSchema.from_dict(d)
    else:
        schema = CovariateSchema.build(d.get("numeric", []), d.get("categorical", {}))
    try:
        return schema, d["outcome"], d["treatment"], d.get("id", "unit_id")
    except KeyError as exc:
        raise ConfigError(f"schema needs {exc.args[0]!r}") from None


def _load_ds(run: Run) -> Dataset:
    info = _read_json(run.path("dataset.json"))
    schema = CovariateSchema.from_dict(info["schema"])
    ds = load_dataset(info["data_path"], schema, info["outcome"], info["treatment"], info["id"])
    if ds.provenance != info["provenance"]:
        raise ProvenanceError("data file changed since `load`")
    return ds


def _load_model(run: Run) -> PropensityModel:
    run.check("fit", "model.json", "scores.csv")
    return PropensityModel.from_json(run.path("model.json").read_text())


def _load_plan(run: Run, ds: Dataset) -> BinPlan:
    run.check("bin", "bins.csv", "bins.json")
    info = _read_json(run.path("bins.json"))
    f = pd.read_csv(run.path("bins.csv"), dtype={"unit_id": str})
    return BinPlan(np.array(info["edges"]), f["unit_id"].to_numpy(dtype=object), f["bin"].to_numpy(), info["method"], ds.provenance)


def _load_balance(run: Run, ds: Dataset) -> BalanceReport:
    run.check("balance", "balance.csv", "balance_overall.csv", "balance.json")
    info = _read_json(run.path("balance.json"))
    table = pd.read_csv(run.path("balance.csv"), float_precision="round_trip")
    overall = pd.read_csv(run.path("balance_overall.csv"), float_precision="round_trip")
    return BalanceReport(table, overall, info["threshold"], info["worst_abs_smd"], info["balanced"],
                         info["flagged_bins"], ds.provenance)


def _load_trim(run: Run, ds: Dataset, scores: ScoreTable) -> TrimDecision:
    run.check("trim", "trim.csv", "trim.json")
    info = _read_json(run.path("trim.json"))
    dropped = pd.read_csv(run.path("trim.csv"), dtype={"unit_id": str})
    keep = ~np.isin(scores.unit_ids, dropped["unit_id"].to_numpy(dtype=object))
    return TrimDecision(scores.unit_ids[keep], dropped, tuple(info["support"]), info["rule"], ds.provenance)


def _load_design(run: Run, ds: Dataset) -> tuple[DesignReport, ScoreTable]:
    run.check("freeze", "design.json")
    stored = _read_json(run.path("design.json"))
    model = _load_model(run)
    scores = ScoreTable.read_csv(run.path("scores.csv"), ds)
    plan = _load_plan(run, ds)
    balance = _load_balance(run, ds)
    trim = _load_trim(run, ds, scores)
    design = DesignReport(model.digest(), plan, balance, trim, True, stored["override"], ds.provenance, stored.get("history", []))
    if design.to_dict() != stored:
        raise ProvenanceError("design artifacts no longer match design.json")
    return design, scores


def _load_matches(run: Run, ds: Dataset, design: DesignReport) -> MatchSet:
    run.check("match", "matches.csv", "unmatched.csv", "match.json")
    info = _read_json(run.path("match.json"))
    if info["design_digest"] != design.digest():
        raise ProvenanceError("matches were built under a different design")
    pairs = pd.read_csv(run.path("matches.csv"), dtype={"focal_id": str, "clone_id": str}, float_precision="round_trip")
    pairs["focal_z"] = ds.z[ds.positions(pairs["focal_id"])]
    um = pd.read_csv(run.path("unmatched.csv"), dtype={"focal_id": str})
    spec = match_spec(info["spec"])
    return MatchSet(pairs, um, spec, info["caliper_value"], info["design_digest"], info["dataset_digest"])


def _released(run: Run, ds: Dataset, design: DesignReport) -> Dataset:
    run.check("release", "release.json")
    return release_escrow(ds, design)


# -- subcommands ---------------------------------------------------------------


def cmd_load(args, run: Run, cfg: dict) -> list[str]:
    if not args.data:
        raise ConfigError("`load` needs --data")
    schema_src = _read_json(Path(args.schema)) if args.schema else cfg.get("schema")
    if not schema_src:
        raise ConfigError("`load` needs --schema or a `schema` entry in --config")
    schema, outcome, treatment, id_col = _schema_from(schema_src)
    ds = load_dataset(args.data, schema, outcome, treatment, id_col)
    _write_json(run.path("dataset.json"), {
        "data_path": str(Path(args.data).resolve()),
        "provenance": ds.provenance,
        "schema": ds.schema.to_dict(),
        "outcome": outcome,
        "treatment": treatment,
        "id": id_col,
        "n_units": len(ds),
        "n_treated": int(ds.z.sum()),
        "n_rejected": int(len(ds.rejections)),
    })
    ds.rejections.to_csv(run.path("rejections.csv"), index=False)
    stored = {k: v for k, v in cfg.items() if k != "schema"}
    _write_json(run.path("config.json"), stored)
    print(f"loaded {len(ds)} units ({int(ds.z.sum())} treated), {len(ds.rejections)} rows rejected; outcomes sealed")
    return ["dataset.json", "rejections.csv", "config.json"]


def cmd_fit(args, run, cfg):
    ds = _load_ds(run)
    model = fit_propensity(ds, cfg["ridge"], cfg["max_iter"], cfg["tol"])
    run.path("model.json").write_text(model.to_json())
    score(model, ds).to_csv(run.path("scores.csv"))
    state = "converged" if model.converged else f"NOT converged ({model.message})"
    print(f"propensity model {state} after {model.iterations} iterations")
    return ["model.json", "scores.csv"]


def _trim_rule(cfg):
    rule = cfg["trim"]
    if isinstance(rule, (tuple, list)):
        return ("lp-window", float(rule[-2]), float(rule[-1]))
    return rule


def cmd_trim(args, run, cfg):
    ds = _load_ds(run)
    _load_model(run)
    scores = ScoreTable.read_csv(run.path("scores.csv"), ds)
    trim = trim_support(scores, _trim_rule(cfg))
    trim.dropped.to_csv(run.path("trim.csv"), index=False)
    _write_json(run.path("trim.json"), trim.summary())
    print(f"support [{trim.support[0]:.4f}, {trim.support[1]:.4f}]; dropped {len(trim.dropped)} units")
    return ["trim.csv", "trim.json"]


def cmd_bin(args, run, cfg):
    ds = _load_ds(run)
    _load_model(run)
    scores = ScoreTable.read_csv(run.path("scores.csv"), ds)
    retained = None
    if run.fresh("trim"):
        retained = _load_trim(run, ds, scores)
    plan = assign_bins(scores, int(cfg["bins"]), cfg["bin_method"], retained=retained)
    plan.to_frame().to_csv(run.path("bins.csv"), index=False)
    _write_json(run.path("bins.json"), {**plan.summary(), "restricted_to_trim": retained is not None})
    print(f"{plan.n_bins} bins, counts {plan.counts().tolist()}")
    return ["bins.csv", "bins.json"]


def cmd_balance(args, run, cfg):
    ds = _load_ds(run)
    plan = _load_plan(run, ds)
    rep = balance_report(ds, plan, float(cfg["threshold"]))
    rep.table.to_csv(run.path("balance.csv"), index=False)
    rep.overall.to_csv(run.path("balance_overall.csv"), index=False)
    _write_json(run.path("balance.json"), rep.summary())
    print(rep.per_bin().to_string(float_format=lambda v: f"{v:.3f}"))
    verdict = "balanced" if rep.balanced else "NOT balanced"
    print(f"worst within-bin |smd| = {rep.worst_abs_smd:.3f} (threshold {rep.threshold}): {verdict}")
    for w in rep.warnings:
        print(f"warning: {w}")
    return ["balance.csv", "balance_overall.csv", "balance.json"]


def cmd_freeze(args, run, cfg):
    ds = _load_ds(run)
    model = _load_model(run)
    scores = ScoreTable.read_csv(run.path("scores.csv"), ds)
    plan = _load_plan(run, ds)
    balance = _load_balance(run, ds)
    trim = _load_trim(run, ds, scores)
    history = [
        {"model_digest": s["outputs"].get("model.json"), "step": s["step"]}
        for s in run.manifest["steps"] if s["step"] == "fit"
    ][:-1]
    design = freeze_design(model, plan, balance, trim, override=bool(args.override_balance), history=history)
    run.path("design.json").write_text(design.to_json())
    note = " (balance override recorded)" if design.override else ""
    print(f"design frozen{note}: {design.digest()}")
    return ["design.json"]


def cmd_match(args, run, cfg):
    ds = _load_ds(run)
    design, scores = _load_design(run, ds)
    ms = match(scores, design, match_spec(cfg))
    ms.to_csv(run.path("matches.csv"))
    ms.unmatched_to_csv(run.path("unmatched.csv"))
    run.path("match.json").write_text(ms.to_json())
    print(f"{ms.summary()['n_groups']} clone groups, {len(ms.pairs)} pairs, {len(ms.unmatched)} unmatched; "
          f"total distance {ms.total_distance:.6g}")
    return ["matches.csv", "unmatched.csv", "match.json"]


def cmd_release(args, run, cfg):
    ds = _load_ds(run)
    design, _ = _load_design(run, ds)
    rel = release_escrow(ds, design)
    _write_json(run.path("release.json"), {"audit": list(rel.audit)})
    return ["release.json"]


def cmd_effects(args, run, cfg):
    ds = _load_ds(run)
    design, _ = _load_design(run, ds)
    ms = _load_matches(run, ds, design)
    eff = unit_effects(ms, _released(run, ds, design))
    eff.to_csv(run.path("effects.csv"), index=False)
    att = eff.loc[eff["z"] == 1, "tau_hat"]
    if len(att):
        print(f"{len(eff)} unit effects; ATT estimate {att.mean():.6g} over {len(att)} treated units")
    else:
        print(f"{len(eff)} unit effects")
    return ["effects.csv"]


def _read_effects(run: Run) -> pd.DataFrame:
    run.check("effects", "effects.csv")
    return pd.read_csv(run.path("effects.csv"), dtype={"unit_id": str})


def cmd_rank(args, run, cfg):
    eff = _read_effects(run)
    tl = build_target_list(eff, args.population)
    tl.to_csv(run.path("target_list.csv"))
    _write_json(run.path("target_list.json"), tl.metadata)
    print(f"ranked {len(tl)} units; top decile mean estimated effect "
          f"{tl.scores[tl.deciles == tl.deciles.max()].mean():.6g}")
    return ["target_list.csv", "target_list.json"]


def cmd_compare(args, run, cfg):
    run.check("rank", "target_list.csv")
    causal = TargetList.read_csv(run.path("target_list.csv"), "causal")
    ds = None
    if args.list_b:
        other = TargetList.read_csv(Path(args.list_b), "other")
    elif args.predictive:
        ds = _load_ds(run)
        design, _ = _load_design(run, ds)
        rel = _released(run, ds, design)
        other = sim.predictive_list(rel, causal.unit_ids, "predictive")
    else:
        raise ConfigError("`compare` needs --list-b FILE or --predictive")
    if args.realized:
        f = pd.read_csv(args.realized, dtype={"unit_id": str})
        realized = f.set_index("unit_id")[args.realized_column]
        definition = f"{args.realized_column} from {Path(args.realized).name}"
    elif args.before_after:
        ds = ds or _load_ds(run)
        design, _ = _load_design(run, ds)
        realized = sim.naive_before_after(_released(run, ds, design), args.before_after)["per_unit"]
        definition = f"before-after change (outcome - {args.before_after}); NOT a causal estimate"
    else:
        raise ConfigError("`compare` needs --realized FILE or --before-after COLUMN")
    cmp = compare_lists(causal, other, realized, definition)
    cmp.to_csv(run.path("comparison.csv"))
    cmp.plot_data_to_csv(run.path("comparison_plot.csv"))
    run.path("comparison.json").write_text(comparison_json(cmp))
    print(f"realized effect: {definition}")
    print(cmp.table.pivot(index="decile", columns="list", values="mean").sort_index(ascending=False).to_string())
    return ["comparison.csv", "comparison_plot.csv", "comparison.json"]


def cmd_evaluate(args, run, cfg):
    if not args.truth:
        raise ConfigError("`evaluate` needs --truth")
    eff = _read_effects(run)
    truth = pd.read_csv(args.truth, dtype={"unit_id": str})
    ev = sim.evaluate_run(eff, truth)
    _write_json(run.path("evaluation.json"), ev.to_dict())
    print(json.dumps(ev.to_dict(), indent=2))
    return ["evaluation.json"]


def cmd_simulate(args, cfg_unused=None):
    if args.sim_config:
        dgp = sim.DgpConfig.from_json(Path(args.sim_config).read_text())
    else:
        dgp = sim.preset(args.preset)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n is not None:
        changes["n"] = args.n
    if changes:
        dgp = dgp.replace(**changes)
    result = sim.generate(dgp, workers=args.workers)
    out = Path(args.out)
    result.write(out)
    print(f"wrote {dgp.n} units (seed {dgp.seed}, {sim.RNG_NAME}) to {out}/data.csv; answer key in {out}/truth.csv")
    return 0


STEPS = {
    "load": cmd_load, "fit": cmd_fit, "trim": cmd_trim, "bin": cmd_bin, "balance": cmd_balance,
    "freeze": cmd_freeze, "match": cmd_match, "effects": cmd_effects, "rank": cmd_rank,
    "compare": cmd_compare, "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    defaults = "\n".join(f"  {k:<12} {v!r:<14} {why}" for k, (v, why) in DEFAULTS.items())
    parser = argparse.ArgumentParser(
        prog="psclone",
        description="Propensity-score clone matching with outcomes held in escrow until the design is frozen.",
        epilog=(__doc__.split("\n", 2)[2] + "\nDefaults (override in --config JSON or by flag):\n" + defaults),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", default=".", help="analysis directory holding manifest.json and artifacts")
    common.add_argument("--config", help="JSON file of defaults (and `schema` for load)")

    p = sub.add_parser("load", parents=[common], help="read and validate the unit table; outcomes sealed")
    p.add_argument("--data", help="comma separated file with a header row")
    p.add_argument("--schema", help="JSON schema: numeric, categorical, outcome, treatment, id")

    p = sub.add_parser("fit", parents=[common], help="fit the logistic propensity model and score units")
    p.add_argument("--ridge", type=float)

    p = sub.add_parser("trim", parents=[common], help="drop units outside common support")
    p.add_argument("--trim-window", type=float, nargs=2, metavar=("LO", "HI"), help="lp window instead of arm overlap")

    p = sub.add_parser("bin", parents=[common], help="stratify on linear propensity")
    p.add_argument("--bins", type=int)

    p = sub.add_parser("balance", parents=[common], help="within-bin standardized differences")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("freeze", parents=[common], help="freeze the design (refuses if unbalanced)")
    p.add_argument("--override-balance", action="store_true")

    p = sub.add_parser("match", parents=[common], help="build clone groups")
    p.add_argument("--k", type=int)
    p.add_argument("--caliper", help="number, 'auto' or 'none'")
    p.add_argument("--method", choices=["greedy", "optimal"])
    p.add_argument("--replacement", action="store_true", default=None)
    p.add_argument("--direction", choices=["treated-focal", "control-focal", "both"])

    sub.add_parser("effects", parents=[common], help="release escrow and estimate unit effects")

    p = sub.add_parser("rank", parents=[common], help="decile target list of untreated units")
    p.add_argument("--population", choices=["untreated", "all"], default="untreated")

    p = sub.add_parser("compare", parents=[common], help="decile-by-decile comparison against another list")
    p.add_argument("--list-b", help="CSV with unit_id, score")
    p.add_argument("--predictive", action="store_true", help="use the regression-prediction list as list B")
    p.add_argument("--realized", help="CSV with unit_id and a realized value column")
    p.add_argument("--realized-column", default="value")
    p.add_argument("--before-after", metavar="BASELINE", help="realized = outcome - BASELINE (non-causal)")

    p = sub.add_parser("evaluate", parents=[common], help="score effects against a simulation answer key")
    p.add_argument("--truth")

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic population and answer key")
    p.add_argument("--preset", default="doctors", choices=sorted(sim.PRESETS))
    p.add_argument("--sim-config", help="DGP config JSON (overrides --preset)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="simulation")
    return parser


def _fail(exc: PsCloneError) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    print(json.dumps(record), file=sys.stderr)
    return exc.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        run = Run(args.run_dir)
        cmd = args.command
        if cmd == "effects" and not run.fresh("freeze"):
            raise EscrowViolation("outcomes stay in escrow until `freeze` has produced a design")
        cfg = _config(args, run)
        started = _now()
        steps = ["release", "effects"] if cmd == "effects" else [cmd]
        for step in steps:
            run.require(step)
            fn = cmd_release if step == "release" else STEPS[step]
            outputs = fn(args, run, cfg)
            snapshot = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items() if k != "schema"}
            run.record(step, snapshot, {"dataset": _read_json(run.path("dataset.json"))["provenance"]}, outputs, started)
        return 0
    except PsCloneError as exc:
        return _fail(exc)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(type("InputError", (PsCloneError,), {"exit_code": 7})(str(exc)))


if __name__ == "__main__":
    sys.exit(main())
