"""Command line interface: test, invert, power, simulate.

Runs are driven by a single JSON or TOML config file with a few flag
overrides. Batch commands repeat the focal-set draw L times with per-draw
streams keyed by (seed, draw index), emit one JSON record per draw
(newline-delimited) plus a summary, and stamp every output with the hash of
the resolved config, the seed and the package version, so identical
invocations produce byte-identical files.

Exit codes: 0 success, 2 config error, 3 data error, 4 computation cap
exceeded, 1 anything else. CRTEST_THREADS > 1 runs the draw loop in a thread
pool; results are keyed by draw index, so outputs do not depend on it.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import (
    ConditioningEvent,
    ContrastHypothesis,
    MechanismSpec,
    compatible_set,
    draw_focals,
)
from .design import Assignment, DesignSpec, sample
from .engine import pvalue_exact, pvalue_monte_carlo, pvalue_permutation
from .errors import ConfigError, CrtestError
from .estimate import (
    AdditiveEffectModel,
    exact_inversion,
    monte_carlo_inversion,
    permutation_inversion,
    residualize,
)
from .exposure import ExposureMapSpec, ExposureRule
from .population import (
    ColumnSchema,
    OutcomeData,
    load_assignment,
    load_edges,
    load_population,
    save_population,
    second_order_relation,
    with_adjacency,
)
from .power import (
    PowerScenario,
    default_tau_steps,
    equal_household_population,
    power_curve,
    two_stage_potential_outcomes,
)
from .rng import spawn_rng

TIE_RULE = "greater_equal"
RESIDUALIZE_STREAM = 999_983  # reserved stream index, above any draw index

DEFAULT_CONFIG = {
    "data": {
        "path": None,
        "edges_path": None,
        "drop_singletons": False,
        "columns": {
            "unit_id": "unit_id",
            "household_id": "household_id",
            "outcome": "y",
            "assignment": "z",
            "covariates": [],
        },
    },
    "design": {"kind": "two_stage", "k1": None, "n1": None, "prob": None},
    "exposure": {"kind": "two_stage", "d": None, "rules": []},
    "hypothesis": {"a": [0, 0], "b": [0, 1]},
    "mechanism": {"kind": "spillover_conditional", "m": None},
    "engine": {
        "method": "permutation",
        "replicates": 10000,
        "enumeration_cap": 1000000,
        "permutation_cap": 1000000,
        "tie_rule": TIE_RULE,
    },
    "estimate": {
        "alpha": 0.05,
        "grid": None,
        "holdout_fraction": 0.3,
        "refine": True,
        "target": None,
    },
    "power": {
        "n_households": 100,
        "n_treated_households": 50,
        "household_size": 2,
        "sigma": 1.0,
        "mu": 0.0,
        "alpha": 0.05,
        "replications": 500,
        "target": "spillover",
        "taus": None,
        "engine_replicates": 999,
        "tau_spillover": 0.0,
        "tau_primary": 0.0,
    },
    "batch": {"draws": 100, "alpha": 0.05},
    "seed": 0,
}


# --- config handling ----------------------------------------------------------


def _merge(base: dict, override: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val)
        else:
            out[key] = val
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text.decode())
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"cannot parse {path} as JSON: {err}")


def resolve_config(file_path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if file_path is not None:
        cfg = _merge(cfg, load_config_file(file_path))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section = cfg
        *parents, leaf = dotted.split(".")
        for part in parents:
            section = section[part]
        if leaf not in section:
            raise ConfigError(f"unknown config key {dotted!r}")
        section[leaf] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _parse_label(raw):
    if isinstance(raw, list):
        return tuple(raw)
    return raw


def _parse_bounds(raw):
    if raw is None:
        return None
    lo, hi = raw
    return (lo, hi)


@dataclass
class ResolvedRun:
    """Typed view of one run config, after cross-validation."""

    cfg: dict
    schema: ColumnSchema
    design: DesignSpec
    exposure_map: ExposureMapSpec
    hypothesis: ContrastHypothesis
    mechanism: MechanismSpec
    seed: int

    @property
    def provenance(self) -> dict:
        return {
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "version": __version__,
            "tie_rule": TIE_RULE,
        }


def build_run(cfg: dict) -> ResolvedRun:
    columns = cfg["data"]["columns"]
    schema = ColumnSchema(
        unit_id=columns["unit_id"],
        household_id=columns["household_id"],
        outcome=columns["outcome"],
        assignment=columns["assignment"],
        covariates=tuple(columns["covariates"]),
    )
    d = cfg["design"]
    design = DesignSpec(kind=d["kind"], k1=d["k1"], n1=d["n1"], prob=d["prob"])
    e = cfg["exposure"]
    rules = tuple(
        ExposureRule(
            label=_parse_label(r["label"]),
            z=r.get("z"),
            household_treated=_parse_bounds(r.get("household_treated")),
            neighbors_treated=_parse_bounds(r.get("neighbors_treated")),
            second_order_treated=_parse_bounds(r.get("second_order_treated")),
        )
        for r in e["rules"]
    )
    exposure_map = ExposureMapSpec(kind=e["kind"], d=e["d"], rules=rules)
    hyp = ContrastHypothesis(
        a=_parse_label(cfg["hypothesis"]["a"]),
        b=_parse_label(cfg["hypothesis"]["b"]),
        map=exposure_map,
    )
    hyp.validate()
    mech = MechanismSpec(kind=cfg["mechanism"]["kind"], m=cfg["mechanism"]["m"])
    mech.validate(hyp, design)
    if cfg["engine"]["tie_rule"] != TIE_RULE:
        raise ConfigError(f"only tie rule {TIE_RULE!r} is implemented")
    if cfg["engine"]["method"] not in ("exact", "permutation", "monte_carlo"):
        raise ConfigError("engine.method must be exact, permutation or monte_carlo")
    if cfg["engine"]["method"] == "permutation" and mech.kind == "network_untreated_focals":
        raise ConfigError(
            "the network mechanism is not a label-permutation test; "
            "use method monte_carlo or exact"
        )
    return ResolvedRun(
        cfg=cfg,
        schema=schema,
        design=design,
        exposure_map=exposure_map,
        hypothesis=hyp,
        mechanism=mech,
        seed=int(cfg["seed"]),
    )


# --- data loading for a run -----------------------------------------------------


@dataclass
class LoadedRun:
    run: ResolvedRun
    pop: object
    y: np.ndarray
    z_obs: Assignment
    design: DesignSpec


def load_run_data(run: ResolvedRun) -> LoadedRun:
    cfg = run.cfg
    path = cfg["data"]["path"]
    if path is None:
        raise ConfigError("data.path is required for this subcommand")
    pop, out = load_population(path, run.schema,
                               drop_singletons=bool(cfg["data"]["drop_singletons"]))
    if cfg["data"]["edges_path"]:
        pop = with_adjacency(pop, load_edges(cfg["data"]["edges_path"]))
        if run.exposure_map.kind in ("network_order2_any", "network_order2_only"):
            pop = second_order_relation(pop)
    z = load_assignment(path, pop, run.schema)
    y = out.y
    design = run.design

    if run.schema.covariates:
        rr = residualize(out.y, out.covariates, cfg["estimate"]["holdout_fraction"],
                         spawn_rng(run.seed, RESIDUALIZE_STREAM),
                         groups=pop.household_of)
        keep = rr.analysis_idx
        pop = pop.subset(keep)
        y = rr.residuals[keep]
        z = z[keep]
        design = _design_for_restricted(design, pop, z)
    a = Assignment.from_z(pop, z)
    design.validate(pop)
    if run.mechanism.kind == "spillover_conditional":
        pop.require_multi_unit_households("the spillover test")
    run.hypothesis.validate(pop)
    return LoadedRun(run=run, pop=pop, y=y, z_obs=a, design=design)


def _design_for_restricted(design: DesignSpec, pop, z) -> DesignSpec:
    """After dropping holdout households, the realized counts define the design."""
    if design.kind == "two_stage":
        w = Assignment.from_z(pop, z).w
        return DesignSpec(kind="two_stage", k1=int((w > 0).sum()))
    if design.kind == "complete":
        return DesignSpec(kind="complete", n1=int(np.asarray(z).sum()))
    return design


# --- batch test -----------------------------------------------------------------


def _one_test_draw(loaded: LoadedRun, draw_index: int):
    run = loaded.run
    cfg = run.cfg
    method = cfg["engine"]["method"]
    replicates = int(cfg["engine"]["replicates"])
    rng = spawn_rng(run.seed, draw_index)
    unconditional = run.mechanism.kind in ("per_household_unconditional", "focal_restriction")
    if method == "monte_carlo":
        report = pvalue_monte_carlo(run.hypothesis, loaded.pop, loaded.design,
                                    run.mechanism, loaded.z_obs, loaded.y,
                                    rng=rng, replicates=replicates)
    else:
        focals = draw_focals(run.mechanism, run.hypothesis, loaded.pop, loaded.z_obs, rng)
        if method == "permutation":
            report = pvalue_permutation(run.hypothesis, loaded.pop, loaded.z_obs, loaded.y,
                                        focals, rng=rng, replicates=replicates,
                                        exact_cap=int(cfg["engine"]["permutation_cap"]),
                                        restrict_to_effective=unconditional)
        else:
            zset = compatible_set(run.hypothesis, loaded.pop, loaded.design, focals,
                                  loaded.z_obs, cap=int(cfg["engine"]["enumeration_cap"]))
            event = ConditioningEvent(focals=focals, zset=zset)
            report = pvalue_exact(run.hypothesis, loaded.pop, loaded.design, event,
                                  loaded.y, loaded.z_obs, mech=run.mechanism)
    record = report.to_dict()
    record["draw"] = draw_index
    return record


def _map_draws(fn, n_draws: int, keep_partial: bool, sink):
    """Run draws (optionally in threads), reporting the failing index."""
    workers = int(os.environ.get("CRTEST_THREADS", "1"))
    done = []
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for record in pool.map(fn, range(n_draws)):
                    done.append(record)
        else:
            for l in range(n_draws):
                done.append(fn(l))
    except Exception as err:
        failed_at = len(done)
        print(f"error in draw {failed_at}: {err}", file=sys.stderr)
        if keep_partial and done:
            sink(done, partial=True)
        raise
    return done


def run_test(cfg: dict, out_dir, keep_partial: bool = False) -> dict:
    """Draw L focal sets, test each, and aggregate (the batch workflow)."""
    run = build_run(cfg)
    loaded = load_run_data(run)
    n_draws = int(cfg["batch"]["draws"])
    alpha = float(cfg["batch"]["alpha"])
    out_dir = _prepare_out_dir(out_dir)

    def sink(records, partial=False):
        _write_ndjson(out_dir / "draws.ndjson", records)
        summary = _test_summary(records, alpha, run.provenance, partial=partial)
        _write_json(out_dir / "summary.json", summary)

    records = _map_draws(lambda l: _one_test_draw(loaded, l), n_draws, keep_partial, sink)
    sink(records)
    return _test_summary(records, alpha, run.provenance)


def _test_summary(records, alpha, provenance, partial=False) -> dict:
    pvals = np.array([r["pvalue"] for r in records])
    rejections = int((pvals <= alpha).sum())
    qs = np.quantile(pvals, [0.1, 0.25, 0.5, 0.75, 0.9]) if pvals.size else [None] * 5
    return {
        "kind": "test",
        "partial": bool(partial),
        "draws": len(records),
        "alpha": alpha,
        "rejections": rejections,
        "rejection_fraction": rejections / len(records) if records else None,
        "pvalue_quantiles": {
            "q10": float(qs[0]), "q25": float(qs[1]), "q50": float(qs[2]),
            "q75": float(qs[3]), "q90": float(qs[4]),
        } if records else None,
        "mean_n_effective": float(np.mean([r["n_effective"] for r in records]))
        if records else None,
        "degenerate_draws": int(sum(r["degenerate"] for r in records)),
        "provenance": provenance,
    }


# --- batch inversion --------------------------------------------------------------


def _effect_model(cfg: dict, hyp: ContrastHypothesis) -> AdditiveEffectModel:
    target = cfg["estimate"]["target"]
    if target is None:
        if hyp.b == (0, 1):
            target = "spillover"
        elif hyp.b == (1, 1):
            target = "primary"
        else:
            return AdditiveEffectModel(target="custom", exposure=hyp.b)
    if target == "custom":
        return AdditiveEffectModel(target="custom", exposure=hyp.b)
    return AdditiveEffectModel(target=target)


def _grid_from_config(cfg: dict):
    grid = cfg["estimate"]["grid"]
    if grid is None:
        return None
    if isinstance(grid, dict):
        return np.linspace(float(grid["lo"]), float(grid["hi"]), int(grid.get("points", 81)))
    return np.asarray([float(g) for g in grid])


def _one_invert_draw(loaded: LoadedRun, draw_index: int):
    run = loaded.run
    cfg = run.cfg
    method = cfg["engine"]["method"]
    rng = spawn_rng(run.seed, draw_index)
    focals = draw_focals(run.mechanism, run.hypothesis, loaded.pop, loaded.z_obs, rng)
    model = _effect_model(cfg, run.hypothesis)
    grid = _grid_from_config(cfg)
    alpha = float(cfg["estimate"]["alpha"])
    refine = bool(cfg["estimate"]["refine"])
    unconditional = run.mechanism.kind in ("per_household_unconditional", "focal_restriction")
    if method == "exact":
        zset = compatible_set(run.hypothesis, loaded.pop, loaded.design, focals,
                              loaded.z_obs, cap=int(cfg["engine"]["enumeration_cap"]))
        event = ConditioningEvent(focals=focals, zset=zset)
        result = exact_inversion(run.hypothesis, loaded.pop, loaded.design, event,
                                 loaded.y, loaded.z_obs, model, alpha=alpha, grid=grid,
                                 mech=run.mechanism, refine=refine)
    elif run.mechanism.kind == "network_untreated_focals":
        result = monte_carlo_inversion(run.hypothesis, loaded.pop, loaded.design,
                                       run.mechanism, loaded.z_obs, loaded.y, focals,
                                       model, alpha=alpha, grid=grid, rng=rng,
                                       replicates=int(cfg["engine"]["replicates"]),
                                       refine=refine)
    else:
        result = permutation_inversion(run.hypothesis, loaded.pop, loaded.z_obs, loaded.y,
                                       focals, model, alpha=alpha, grid=grid, rng=rng,
                                       replicates=int(cfg["engine"]["replicates"]),
                                       exact_cap=int(cfg["engine"]["permutation_cap"]),
                                       restrict_to_effective=unconditional, refine=refine)
    record = result.to_dict()
    record["draw"] = draw_index
    record["width"] = record["ci_high"] - record["ci_low"]
    return record


def run_invert(cfg: dict, out_dir, keep_partial: bool = False) -> dict:
    """Point estimates and intervals across L focal-set draws, with medians."""
    run = build_run(cfg)
    loaded = load_run_data(run)
    n_draws = int(cfg["batch"]["draws"])
    out_dir = _prepare_out_dir(out_dir)

    def sink(records, partial=False):
        _write_ndjson(out_dir / "inversions.ndjson", records)
        _write_json(out_dir / "summary.json",
                    _invert_summary(records, run.provenance, partial=partial))

    records = _map_draws(lambda l: _one_invert_draw(loaded, l), n_draws, keep_partial, sink)
    sink(records)
    return _invert_summary(records, run.provenance)


def _invert_summary(records, provenance, partial=False) -> dict:
    taus = np.array([r["tau_hat"] for r in records])
    lows = np.array([r["ci_low"] for r in records])
    highs = np.array([r["ci_high"] for r in records])
    return {
        "kind": "invert",
        "partial": bool(partial),
        "draws": len(records),
        "median_tau_hat": float(np.median(taus)),
        "median_ci_low": float(np.median(lows)),
        "median_ci_high": float(np.median(highs)),
        "mean_ci_width": float(np.mean(highs - lows)),
        "provenance": provenance,
    }


# --- power ----------------------------------------------------------------------


def run_power(cfg: dict, out_dir) -> dict:
    """Paired conditional-vs-unconditional power tables over an effect grid."""
    p = cfg["power"]
    scenario = PowerScenario(
        n_households=int(p["n_households"]),
        n_treated_households=int(p["n_treated_households"]),
        household_size=int(p["household_size"]),
        tau_spillover=float(p["tau_spillover"]),
        tau_primary=float(p["tau_primary"]),
        sigma=float(p["sigma"]),
        mu=float(p["mu"]),
        alpha=float(p["alpha"]),
        replications=int(p["replications"]),
    )
    scenario.validate()
    target = p["target"]
    if target not in ("spillover", "primary"):
        raise ConfigError("power.target must be spillover or primary")
    taus = p["taus"]
    if taus is None:
        taus = default_tau_steps(scenario.sigma)
    elif isinstance(taus, dict):
        taus = np.linspace(float(taus["lo"]), float(taus["hi"]), int(taus["points"]))
    else:
        taus = [float(t) for t in taus]
    mech_a = MechanismSpec(kind="spillover_conditional" if target == "spillover"
                           else "primary_conditional")
    mech_b = MechanismSpec(kind="per_household_unconditional")
    rows = power_curve(scenario, target, taus, mech_a, mech_b, seed=int(cfg["seed"]),
                       engine_replicates=int(p["engine_replicates"]))
    out_dir = _prepare_out_dir(out_dir)
    _write_csv(out_dir / "power.csv", rows)
    provenance = {
        "config_hash": config_hash(cfg),
        "seed": int(cfg["seed"]),
        "version": __version__,
        "tie_rule": TIE_RULE,
    }
    summary = {"kind": "power", "rows": len(rows), "provenance": provenance}
    _write_json(out_dir / "summary.json", summary)
    return summary


# --- simulate -------------------------------------------------------------------


def run_simulate(args) -> None:
    """Write a synthetic two-stage dataset (reproducible from the seed)."""
    if args.sizes:
        sizes = [int(s) for s in args.sizes.split(",")]
        household_of = np.repeat(np.arange(len(sizes)), sizes)
        from .population import Population

        pop = Population(
            unit_ids=tuple(f"u{i}" for i in range(int(household_of.size))),
            household_ids=tuple(f"h{j}" for j in range(len(sizes))),
            household_of=household_of,
        )
    else:
        pop = equal_household_population(args.households, args.household_size)
    potential = two_stage_potential_outcomes(
        pop, args.tau_spillover, args.tau_primary, args.mu, args.sigma,
        spawn_rng(args.seed, 0),
    )
    design = DesignSpec(kind="two_stage", k1=args.treated_households)
    z = sample(design, pop, spawn_rng(args.seed, 1))
    y = potential.realize(pop, z)
    extra = None
    if args.emit_potential:
        extra = {
            "y_control": potential.table[(0, 0)],
            "y_spillover": potential.table[(0, 1)],
            "y_treated": potential.table[(1, 1)],
        }
    save_population(pop, OutcomeData(y=y), args.out, z=z.z, extra_columns=extra)
    print(f"wrote {pop.n_units} units in {pop.n_households} households to {args.out}")


# --- output helpers ---------------------------------------------------------------


def _prepare_out_dir(out_dir) -> Path:
    if out_dir is None:
        raise ConfigError("--out-dir is required for batch runs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_ndjson(path: Path, records) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path: Path, rows) -> None:
    if not rows:
        raise ConfigError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# --- argument parsing ----------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or TOML run config")
    parser.add_argument("--data", help="population CSV (overrides config)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--draws", type=int, help="number of focal-set draws L")
    parser.add_argument("--alpha", type=float, help="test level")
    parser.add_argument("--method", choices=["exact", "permutation", "monte_carlo"])
    parser.add_argument("--replicates", type=int, help="engine replicates R")
    parser.add_argument("--drop-singletons", action="store_true", default=None)
    parser.add_argument("--out-dir", help="directory for batch outputs")
    parser.add_argument("--keep-partial", action="store_true",
                        help="persist completed draws if a later draw fails")


def _overrides(args, alpha_key: str) -> dict:
    return {
        "data.path": args.data,
        "seed": args.seed,
        "batch.draws": args.draws,
        alpha_key: args.alpha,
        "engine.method": args.method,
        "engine.replicates": args.replicates,
        "data.drop_singletons": args.drop_singletons,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crtest",
        description="Conditional randomization tests for causal effects under interference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="batch hypothesis tests over focal-set draws")
    _add_common(p_test)

    p_inv = sub.add_parser("invert", help="point estimates and confidence intervals")
    _add_common(p_inv)

    p_pow = sub.add_parser("power", help="simulated power comparison tables")
    _add_common(p_pow)

    p_sim = sub.add_parser("simulate", help="generate a synthetic two-stage dataset")
    p_sim.add_argument("--out", required=True, help="output CSV path")
    p_sim.add_argument("--households", type=int, default=100)
    p_sim.add_argument("--household-size", type=int, default=2)
    p_sim.add_argument("--sizes", help="comma-separated household sizes (overrides the two above)")
    p_sim.add_argument("--treated-households", type=int, default=50)
    p_sim.add_argument("--tau-spillover", type=float, default=0.0)
    p_sim.add_argument("--tau-primary", type=float, default=0.0)
    p_sim.add_argument("--mu", type=float, default=0.0)
    p_sim.add_argument("--sigma", type=float, default=1.0)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--emit-potential", action="store_true",
                       help="include the full potential-outcome columns")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            run_simulate(args)
            return 0
        alpha_key = "estimate.alpha" if args.command == "invert" else (
            "power.alpha" if args.command == "power" else "batch.alpha")
        cfg = resolve_config(args.config, _overrides(args, alpha_key))
        if args.command == "test":
            summary = run_test(cfg, args.out_dir, keep_partial=args.keep_partial)
        elif args.command == "invert":
            summary = run_invert(cfg, args.out_dir, keep_partial=args.keep_partial)
        else:
            summary = run_power(cfg, args.out_dir)
        print(json.dumps(summary, sort_keys=True, indent=2))
        return 0
    except CrtestError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
