#!/usr/bin/env python3
"""
Command-line driver.

  simulate    write datasets and truth sidecars for a scenario grid
  evaluate    LOO evaluation of one dataset directory for one second stage
  replicate   simulation study over (scenario x replicate x model) cells
  example     the censored twotrt walk-through with one group held out
  report      print the tables of a finished evaluation or study

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

import SETTINGS
from BACKEND import storage
from BACKEND.api_models import (
    CensorConfig,
    ChainConfig,
    RunManifest,
    ScenarioConfig,
    ScenarioName,
    SecondStage,
)
from BACKEND.jobs import default_jobs, job_rng, job_seed, run_pool
from BACKEND.surrogacy import (
    ModelEvaluation,
    QualityReport,
    compute_true_d,
    correct_cluster_proportion,
    dahl_cluster_estimate,
    density_grid,
    evaluate_model,
    held_out_hits,
    prob_superiority,
    subgroup_summaries,
)
from BACKEND.trialgen import GroupTruth, TrialData, generate_group_effects, simulate_trial

logger = logging.getLogger("surrogate_dpm.cli")

# Stream tags that keep data generation and model fitting seeds apart.
DATA_STREAM = 0
FIT_STREAM = 1
MODEL_CODES = {SecondStage.dpm: 0, SecondStage.simple: 1, SecondStage.null: 2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def configure_logging() -> None:
    level = getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------- manifest


def _scenario_updates(args: argparse.Namespace, base: RunManifest) -> list[dict] | None:
    """--scenario replaces the manifest's grid; --c-z/--c-u alone shift every manifest scenario."""
    scenario = getattr(args, "scenario", None)
    c_z, c_u = getattr(args, "c_z", None), getattr(args, "c_u", None)
    if scenario is not None:
        return [ScenarioConfig(scenario=scenario, c_z=c_z or 0.0, c_u=c_u or 0.0).model_dump()]
    shift = {k: v for k, v in (("c_z", c_z), ("c_u", c_u)) if v is not None}
    if not shift:
        return None
    return [{**s.model_dump(), **shift} for s in base.scenarios]


def build_manifest(args: argparse.Namespace) -> RunManifest:
    if getattr(args, "manifest", None):
        path = Path(args.manifest)
        try:
            base = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"{path}: {exc}") from exc
    else:
        base = RunManifest(
            scenarios=[ScenarioConfig(scenario=ScenarioName.linear)],
            output_dir=Path(os.getenv("SURROGATE_OUTPUT_DIR", SETTINGS.OUTPUT_DIR)),
            jobs=default_jobs(),
        )

    updates: dict = {}
    scenarios = _scenario_updates(args, base)
    if scenarios is not None:
        updates["scenarios"] = scenarios
    if getattr(args, "seed", None) is not None:
        updates["root_seed"] = args.seed
    if getattr(args, "replicates", None) is not None:
        updates["n_replicates"] = args.replicates
    if getattr(args, "jobs", None) is not None:
        updates["jobs"] = args.jobs
    if getattr(args, "output", None):
        updates["output_dir"] = args.output
    if getattr(args, "models", None):
        updates["models"] = args.models
    if getattr(args, "n_aux", None) is not None:
        updates["n_aux"] = args.n_aux
    if getattr(args, "literal_alpha", False):
        updates["literal_alpha"] = True
    if getattr(args, "scale_matrix_inverted", False):
        updates["scale_matrix_inverted"] = True
    if getattr(args, "quick", False):
        updates["chain"] = ChainConfig.quick().model_dump()
    else:
        chain = {k: getattr(args, k, None) for k in ("n_iter", "burn_in", "thin", "k_init")}
        chain = {k: v for k, v in chain.items() if v is not None}
        if chain:
            updates["chain"] = {**base.chain.model_dump(), **chain}
    if getattr(args, "censor", False):
        updates["trial"] = {**base.trial.model_dump(), "censor": CensorConfig().model_dump()}
    if not updates:
        return base
    return RunManifest.model_validate({**base.model_dump(), **updates})


# ---------------------------------------------------------------- shared steps


def replicate_dir(manifest: RunManifest, scenario: ScenarioConfig, rep: int) -> Path:
    return Path(manifest.output_dir) / scenario.label / f"rep_{rep + 1:03d}"


def simulate_replicate(manifest: RunManifest, scen_idx: int, rep: int) -> tuple[TrialData, list[GroupTruth]]:
    scenario = manifest.scenarios[scen_idx]
    rng = job_rng(manifest.root_seed, DATA_STREAM, scen_idx, scenario.seed, rep)
    truth = generate_group_effects(scenario, rng)
    return simulate_trial(truth, manifest.trial, scenario, rng), truth


def evaluate_dataset(data: TrialData, truth: list[GroupTruth], model: SecondStage, manifest: RunManifest,
                     coords: tuple[int, ...], jobs: int, plugin_full_mean: bool = False,
                     ) -> tuple[QualityReport, ModelEvaluation, ModelEvaluation]:
    """Evaluate one second stage plus the surrogate-free comparator and build the report."""
    z = np.array([g.z for g in truth])

    def run(stage: SecondStage) -> ModelEvaluation:
        seed = job_seed(manifest.root_seed, FIT_STREAM, *coords, MODEL_CODES[stage])
        return evaluate_model(data, z, manifest.dpm_config(stage), manifest.stage1, seed, jobs, plugin_full_mean)

    evaluation = run(model)
    null_eval = evaluation if model is SecondStage.null else run(SecondStage.null)
    report = subgroup_summaries(
        evaluation.folds,
        dahl_cluster_estimate(evaluation.full.labels),
        data.n_treatments,
        z,
        model.value,
        null_results=None if model is SecondStage.null else null_eval.folds,
        true_mu=[g.mu for g in truth],
        true_clusters=[g.true_cluster for g in truth],
    )
    return report, evaluation, null_eval


def write_evaluation(out_dir: Path, report: QualityReport, evaluation: ModelEvaluation,
                     null_eval: ModelEvaluation) -> None:
    storage.write_report(report.to_dict(), out_dir / "report.json")
    storage.write_posterior(evaluation.full, out_dir / "posterior.csv")
    storage.write_table(report.groups, out_dir / "groups.csv")
    storage.write_table(
        [
            {"cluster": c, "n_groups": len(e["groups"]), "flagged": e["flagged"],
             "p_superiority": e.get("p_superiority"), **{f"dhat_{k}": v for k, v in e["dhat"].items()}}
            for c, e in report.per_cluster.items()
        ],
        out_dir / "clusters.csv",
    )
    dhat0 = None if null_eval is evaluation else null_eval.dhat
    storage.write_table(pd.DataFrame(density_grid(evaluation.dhat, dhat0)), out_dir / "density.csv")


def _print_report(report: dict) -> None:
    overall = report["dhat_summary"]
    print(f"model: {report['second_stage']}")
    print(f"median D-hat: {overall['median']:.3f} (95% {overall['q025']:.3f} to {overall['q975']:.3f})")
    if report.get("p_superiority") is not None:
        print(f"P(D-hat < D-hat-0): {report['p_superiority']:.3f}")
    if report.get("d_summary"):
        print(f"median D (truth): {report['d_summary']['median']:.3f}")
    if report.get("correct_cluster") is not None:
        print(f"correct-cluster proportion: {report['correct_cluster']:.3f}")
    for c, entry in report["per_cluster"].items():
        flag = " *" if entry["flagged"] else ""
        p_sup = entry.get("p_superiority")
        p_text = "" if p_sup is None else f", P(sup) {p_sup:.3f}"
        print(f"  cluster {c}: {len(entry['groups'])} groups, median D-hat {entry['dhat']['median']:.3f}{p_text}{flag}")


# ---------------------------------------------------------------- verbs


def cmd_simulate(manifest: RunManifest) -> list[Path]:
    written = []
    for scen_idx, scenario in enumerate(manifest.scenarios):
        for rep in range(manifest.n_replicates):
            data, truth = simulate_replicate(manifest, scen_idx, rep)
            out = replicate_dir(manifest, scenario, rep)
            storage.write_dataset(data, out / "dataset.csv")
            storage.write_truth(truth, out / "truth.csv")
            written.append(out)
    logger.info("simulated %d datasets under %s", len(written), manifest.output_dir)
    return written


def cmd_evaluate(dataset_dir: Path, model: SecondStage, manifest: RunManifest,
                 plugin_full_mean: bool = False) -> QualityReport:
    dataset_dir = Path(dataset_dir)
    data = storage.read_dataset(dataset_dir / "dataset.csv")
    truth = storage.read_truth(dataset_dir / "truth.csv")
    if len(truth) != data.n_groups:
        raise ValueError(f"{dataset_dir}: truth has {len(truth)} groups, dataset has {data.n_groups}")
    report, evaluation, null_eval = evaluate_dataset(data, truth, model, manifest, (0,), manifest.jobs, plugin_full_mean)
    write_evaluation(dataset_dir / model.value, report, evaluation, null_eval)
    return report


def _run_cell(task: tuple) -> dict:
    manifest, scen_idx, rep, model = task
    scenario = manifest.scenarios[scen_idx]
    name = f"{scenario.label}/rep_{rep + 1:03d}/{model.value}"
    cell = replicate_dir(manifest, scenario, rep) / model.value / "cell.npz"
    if storage.is_done(cell.parent):
        return {"name": name, "status": "skipped", "message": "already done"}
    started = time.perf_counter()
    try:
        data, truth = simulate_replicate(manifest, scen_idx, rep)
        z = np.array([g.z for g in truth])
        seed = job_seed(manifest.root_seed, FIT_STREAM, scen_idx, scenario.seed, rep, MODEL_CODES[model])
        evaluation = evaluate_model(data, z, manifest.dpm_config(model), manifest.stage1, seed, jobs=1)
        true_clusters = [g.true_cluster for g in truth]
        storage.save_cell(
            cell,
            dhat=evaluation.dhat,
            d=compute_true_d(evaluation.folds, [g.mu for g in truth]),
            correct_cluster=np.array(correct_cluster_proportion(evaluation.folds, true_clusters)),
        )
    except Exception as exc:
        logger.warning("cell %s failed: %s", name, exc)
        return {"name": name, "status": "error", "message": f"{type(exc).__name__}: {exc}"}
    logger.info("cell %s done in %.1fs", name, time.perf_counter() - started)
    return {"name": name, "status": "success", "message": ""}


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate_replicates(manifest: RunManifest) -> dict[str, pd.DataFrame]:
    """Reduce finished cells into the prediction-error, superiority and cluster-recovery tables."""
    error_rows, sup_rows, cluster_rows = [], [], []
    for scenario in manifest.scenarios:
        per_model: dict[SecondStage, dict[str, list[float]]] = {}
        for model in manifest.models:
            acc = {"dhat": [], "d": [], "p_sup": [], "p_true": [], "correct": []}
            for rep in range(manifest.n_replicates):
                rep_dir = replicate_dir(manifest, scenario, rep)
                if not storage.is_done(rep_dir / model.value):
                    continue
                cell = storage.load_cell(rep_dir / model.value / "cell.npz")
                acc["dhat"].append(float(np.median(cell["dhat"])))
                acc["d"].append(float(np.median(cell["d"])))
                acc["correct"].append(float(cell["correct_cluster"]))
                if model is not SecondStage.null and storage.is_done(rep_dir / SecondStage.null.value):
                    null_cell = storage.load_cell(rep_dir / SecondStage.null.value / "cell.npz")
                    acc["p_sup"].append(prob_superiority(cell["dhat"], null_cell["dhat"]))
                    acc["p_true"].append(prob_superiority(cell["d"], null_cell["d"]))
            per_model[model] = acc

        for model, acc in per_model.items():
            key = {"scenario": scenario.label, "model": model.value}
            dhat_mean, dhat_sd = _mean_sd(acc["dhat"])
            d_mean, d_sd = _mean_sd(acc["d"])
            error_rows.append({**key, "n": len(acc["dhat"]), "median_dhat_mean": dhat_mean,
                               "median_dhat_sd": dhat_sd, "median_d_mean": d_mean, "median_d_sd": d_sd})
            if model is not SecondStage.null:
                p_mean, p_sd = _mean_sd(acc["p_sup"])
                t_mean, t_sd = _mean_sd(acc["p_true"])
                sup_rows.append({**key, "n": len(acc["p_sup"]), "p_dhat_mean": p_mean, "p_dhat_sd": p_sd,
                                 "p_d_mean": t_mean, "p_d_sd": t_sd})
            c_mean, c_sd = _mean_sd(acc["correct"])
            if np.isfinite(c_mean):
                cluster_rows.append({**key, "n": len(acc["correct"]), "correct_mean": c_mean, "correct_sd": c_sd})

    return {
        "table_prediction_error": pd.DataFrame(error_rows),
        "table_superiority": pd.DataFrame(sup_rows),
        "cluster_recovery": pd.DataFrame(cluster_rows),
    }


def cmd_replicate(manifest: RunManifest) -> dict[str, pd.DataFrame]:
    models = list(dict.fromkeys([*manifest.models, SecondStage.null]))
    manifest = manifest.model_copy(update={"models": models})
    tasks = [
        (manifest, scen_idx, rep, model)
        for scen_idx in range(len(manifest.scenarios))
        for rep in range(manifest.n_replicates)
        for model in models
    ]
    logger.info("replicate: %d cells on %d workers", len(tasks), manifest.jobs)
    results = run_pool(_run_cell, tasks, manifest.jobs)

    out_dir = Path(manifest.output_dir)
    failures = [r for r in results if r["status"] == "error"]
    storage.write_table(pd.DataFrame(failures, columns=["name", "status", "message"]), out_dir / "failures.csv")
    if failures:
        logger.warning("%d of %d cells failed; see %s", len(failures), len(results), out_dir / "failures.csv")

    tables = aggregate_replicates(manifest)
    for name, frame in tables.items():
        storage.write_table(frame, out_dir / f"{name}.csv")
    return tables


def cmd_example(manifest: RunManifest) -> QualityReport:
    trial = manifest.trial.model_copy(update={"censor": CensorConfig()})
    manifest = manifest.model_copy(update={
        "scenarios": [ScenarioConfig(scenario=ScenarioName.twotrt, c_z=0.0, c_u=0.0)],
        "trial": trial,
    })
    out_dir = Path(manifest.output_dir) / "example"
    data, truth = simulate_replicate(manifest, 0, 0)
    storage.write_dataset(data, out_dir / "dataset.csv")
    storage.write_truth(truth, out_dir / "truth.csv")
    censored = 1.0 - float(data.event.mean())
    logger.info("example dataset: %d subjects, %.1f%% censored", data.n_subjects, 100 * censored)

    report, evaluation, null_eval = evaluate_dataset(data, truth, SecondStage.dpm, manifest, (0,), manifest.jobs)
    held_out = SETTINGS.EXAMPLE_GROUP - 1
    fold = next(r for r in evaluation.folds if r.j == held_out)
    hits = held_out_hits(fold.label_draws, fold.assigned_cluster_draws, [g.true_cluster for g in truth], held_out)
    trace = pd.DataFrame({
        "draw": np.arange(1, len(fold.assigned_cluster_draws) + 1),
        "label": fold.assigned_cluster_draws + 1,
        "correct": np.nan if hits is None else hits.astype(int),
        "mu_tilde": fold.loo_mu_draws,
    })
    report.extra = {
        "held_out_group": SETTINGS.EXAMPLE_GROUP,
        "held_out_assignment_rate": float(trace["correct"].mean()),
        "censored_fraction": censored,
    }
    write_evaluation(out_dir / SecondStage.dpm.value, report, evaluation, null_eval)
    storage.write_table(trace, out_dir / f"trace_group_{SETTINGS.EXAMPLE_GROUP}.csv")
    return report


def cmd_report(run_dir: Path) -> None:
    run_dir = Path(run_dir)
    reports = sorted(run_dir.glob("**/report.json"))
    tables = [run_dir / f"{name}.csv" for name in ("table_prediction_error", "table_superiority", "cluster_recovery")]
    if not reports and not any(t.exists() for t in tables):
        raise FileNotFoundError(f"{run_dir}: no report.json or study tables found")
    for path in reports:
        print(f"== {path.relative_to(run_dir)}")
        _print_report(storage.read_report(path))
    for path in tables:
        if path.exists():
            print(f"== {path.name}")
            print(storage.read_table(path).to_string(index=False))


# ---------------------------------------------------------------- argparse


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, help="JSON run manifest; flags override its fields.")
    p.add_argument("--seed", type=int, help="Root seed.")
    p.add_argument("--jobs", type=int, help="Worker processes (default SURROGATE_JOBS or 1).")
    p.add_argument("--output", type=Path, help="Output root directory.")
    p.add_argument("--n-iter", dest="n_iter", type=int, help="Gibbs sweeps per chain.")
    p.add_argument("--burn-in", dest="burn_in", type=int, help="Sweeps discarded before retention.")
    p.add_argument("--thin", type=int, help="Keep every n-th sweep after burn-in.")
    p.add_argument("--k-init", dest="k_init", type=int, help="Initial k-means clusters.")
    p.add_argument("--n-aux", dest="n_aux", type=int, help="Auxiliary components per assignment update.")
    p.add_argument("--quick", action="store_true", help="Short chains for smoke runs.")
    p.add_argument("--paper-literal-alpha", "--literal-alpha", dest="literal_alpha", action="store_true",
                   help="Use weight a+k+1 in the concentration update.")
    p.add_argument("--scale-matrix-inverted", action="store_true",
                   help="Use weighted variances instead of inverse variances for the base scale.")


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", choices=[s.value for s in ScenarioName], default=None)
    p.add_argument("--c-z", dest="c_z", type=float, default=None)
    p.add_argument("--c-u", dest="c_u", type=float, default=None)
    p.add_argument("--replicates", type=int, help="Replicates per scenario.")
    p.add_argument("--censor", action="store_true", help="Uniform right censoring on (20, 60].")


def parse_args(argv: list[str]) -> argparse.Namespace:
    p = _Parser(description="Evaluate trial-level surrogates with a Dirichlet-process mixture.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="Write simulated datasets.")
    _add_scenario_flags(sim)
    for flag, kw in (("--manifest", {"type": Path}), ("--seed", {"type": int}), ("--output", {"type": Path})):
        sim.add_argument(flag, **kw)

    ev = sub.add_parser("evaluate", help="LOO evaluation of one dataset directory.")
    ev.add_argument("dataset", type=Path, help="Directory holding dataset.csv and truth.csv.")
    ev.add_argument("--model", choices=[m.value for m in SecondStage], default=SecondStage.dpm.value)
    ev.add_argument("--plugin-full-mean", action="store_true",
                    help="Compare against the all-data posterior mean instead of matched draws.")
    _add_model_flags(ev)

    rep = sub.add_parser("replicate", help="Simulation study over a scenario grid.")
    _add_scenario_flags(rep)
    rep.add_argument("--models", nargs="+", type=SecondStage, choices=list(SecondStage))
    _add_model_flags(rep)

    ex = sub.add_parser("example", help="Censored twotrt walk-through.")
    _add_model_flags(ex)

    rp = sub.add_parser("report", help="Print the tables of a finished run.")
    rp.add_argument("run_dir", type=Path)
    return p.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        manifest = None if args.command == "report" else build_manifest(args)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "report":
            cmd_report(args.run_dir)
        elif args.command == "simulate":
            cmd_simulate(manifest)
        elif args.command == "evaluate":
            report = cmd_evaluate(args.dataset, SecondStage(args.model), manifest, args.plugin_full_mean)
            _print_report(report.to_dict())
        elif args.command == "replicate":
            tables = cmd_replicate(manifest)
            print(tables["table_prediction_error"].to_string(index=False))
        elif args.command == "example":
            report = cmd_example(manifest)
            _print_report(report.to_dict())
            print(f"group {SETTINGS.EXAMPLE_GROUP} assignment rate: {report.extra['held_out_assignment_rate']:.3f}")
    except Exception as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
