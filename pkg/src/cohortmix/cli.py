"""Command-line interface: ``cohortmix <command> [options]``.

Commands
--------
fit           sample the posterior and write draws, stats and a run manifest
diagnose      R-hat, divergences, PSIS-LOO, Pareto k and mode selection for a run
forecast      rate, predictive-rate and completed-family-size summaries
evaluate      held-out RMSE and coverage against freeze-rate/freeze-slope baselines
simulate      write a synthetic dataset in the canonical CSV format
print-config  print the model configuration (defaults plus overrides)

Exit status is 0 on success, 2 on invalid input and 3 when the sampler
cannot start.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, evaluate, forecast
from . import io as cio
from .data import FertilityDataset
from .densities import Family
from .model import CohortParams, FertilityModel, ModelConfig
from .sampler import Draws, SamplerAbort, SamplerConfig, run_chains

log = logging.getLogger("cohortmix")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3

RUN_FILES = {
    "draws": "draws.csv",
    "stats": "stats.csv",
    "manifest": "manifest.json",
    "config": "config.txt",
    "data": "data.csv",
    "diagnostics": "diagnostics.json",
}


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shared option groups


def _add_data_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--births", type=Path, help="HFD-style births table")
    p.add_argument("--exposure", type=Path, help="HFD-style exposure table")
    p.add_argument("--data", type=Path, help="canonical CSV (cohort,age_label,births,exposure)")


def _add_model_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value model configuration")
    p.add_argument("--family1", choices=[f.value for f in Family])
    p.add_argument("--family2", choices=[f.value for f in Family])


def _add_sampler_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=10000, help="iterations per chain, warmup included")
    p.add_argument("--warmup", type=int, help="warmup iterations (default: half of --iters)")
    p.add_argument("--thin", type=int, default=4)
    p.add_argument("--target-accept", type=float, default=0.95)
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--jobs", type=int, default=1, help="chains run in parallel processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohortmix", description="Cohort fertility mixture model forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="sample the posterior")
    _add_data_options(p)
    _add_model_options(p)
    _add_sampler_options(p)
    p.add_argument("--jumpoff", type=int, help="drop observations after this year before fitting")
    p.add_argument("--out", type=Path, required=True, help="run directory")

    p = sub.add_parser("diagnose", help="convergence and LOO diagnostics for a run")
    p.add_argument("run", type=Path)
    p.add_argument("--out", type=Path, help="report path (default RUN/diagnostics.json)")
    p.add_argument("--refit", action="store_true", help="refit to replace points with Pareto k > 0.7 by exact LOO")

    p = sub.add_parser("forecast", help="summarize posterior and predictive rates")
    p.add_argument("run", type=Path)
    p.add_argument("--horizon", type=int, default=0, help="number of new cohorts to simulate")
    p.add_argument("--exposure-schedule", type=Path, help="CSV age,exposure for predictive rates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--all-chains", action="store_true", help="ignore the mode selection from diagnose")
    p.add_argument("--out", type=Path, help="summary CSV (default RUN/forecast.csv)")

    p = sub.add_parser("evaluate", help="held-out forecast evaluation")
    _add_data_options(p)
    _add_model_options(p)
    _add_sampler_options(p)
    p.add_argument("--jumpoff", type=int, required=True, help="last year used for fitting (T0)")
    p.add_argument("--holdout-years", type=int, default=10, help="evaluation window length H")
    p.add_argument("--label", default="data", help="dataset name in the report columns")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_model_options(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cohorts", type=int, default=30)
    p.add_argument("--first-cohort", type=int, default=1950)
    p.add_argument("--exposure-level", type=float, default=5e5)
    p.add_argument("--jumpoff", type=int, help="drop ages with cohort + age beyond this year")
    p.add_argument("--out", type=Path, required=True, help="canonical CSV to write")

    p = sub.add_parser("print-config", help="print the model configuration")
    _add_model_options(p)
    return parser


# ---------------------------------------------------------------------------
# helpers


def load_config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if getattr(args, "config", None) else ModelConfig()
    updates = {k: Family.parse(getattr(args, k)) for k in ("family1", "family2") if getattr(args, k, None)}
    return dataclasses.replace(cfg, **updates) if updates else cfg


def sampler_config(args) -> SamplerConfig:
    return SamplerConfig(
        chains=args.chains,
        iterations=args.iters,
        warmup=args.warmup,
        target_accept=args.target_accept,
        max_depth=args.max_depth,
        thin=args.thin,
        seed=args.seed,
        n_jobs=args.jobs,
    )


def truncate(data: FertilityDataset, jumpoff: int) -> FertilityDataset:
    """Keep single ages with cohort + age <= jumpoff."""
    t = data.cohorts[:, None] + data.grid.ages[None, :]
    out = data.select_ages(data.age_observed & (t <= jumpoff))
    if out.n_cohorts == 0:
        raise CliError(f"no observations at or before {jumpoff}")
    return out


def fit_run(data: FertilityDataset, cfg: ModelConfig, scfg: SamplerConfig, out: Path, command: str = "") -> Draws:
    out.mkdir(parents=True, exist_ok=True)
    model = FertilityModel(data, cfg)
    draws = run_chains(model, scfg)
    manifest = cio.RunManifest(cfg.digest(), scfg.seed, cio.fingerprint(data), _sampler_record(scfg), command=command)
    manifest.write(out / RUN_FILES["manifest"])
    (out / RUN_FILES["config"]).write_text(cfg.to_text())
    cio.write_canonical(data, out / RUN_FILES["data"])
    draws.write_csv(out / RUN_FILES["draws"], out / RUN_FILES["stats"])
    for key in ("draws", "stats", "data"):
        cio.write_sidecar(out / RUN_FILES[key], manifest.hash)
    log.info("wrote %s (%d divergent transitions)", out, draws.n_divergent)
    return draws


def _sampler_record(scfg: SamplerConfig) -> dict:
    d = dict(vars(scfg))
    d.pop("n_jobs", None)  # parallelism does not change results
    return d


class Run:
    """A fitted run directory, validated against its manifest."""

    def __init__(self, path: Path):
        self.path = path
        files = {k: path / v for k, v in RUN_FILES.items()}
        for key in ("draws", "stats", "manifest", "config", "data"):
            if not files[key].exists():
                raise CliError(f"{files[key]} not found")
        self.manifest = cio.RunManifest.read(files["manifest"])
        self.config = ModelConfig.load(files["config"])
        if self.config.digest() != self.manifest.config_hash:
            raise CliError("run config does not match its manifest")
        self.data = cio.read_canonical(files["data"], self.config.grid())
        if cio.fingerprint(self.data) != self.manifest.dataset_fingerprint:
            raise CliError("run data does not match its manifest")
        for key in ("draws", "stats", "data"):
            meta = cio.read_sidecar(files[key])
            if meta.get("manifest_hash") != self.manifest.hash:
                raise CliError(f"{files[key]} belongs to a different run")
        self.draws = Draws.read_csv(files["draws"], files["stats"])
        self.draws.config = SamplerConfig(**self.manifest.sampler)
        self.model = FertilityModel(self.data, self.config)
        if self.draws.param_names != self.model.param_names:
            raise CliError("draws do not match the model parameters")
        self.files = files

    def selected_chains(self) -> list[int]:
        if self.files["diagnostics"].exists():
            report = json.loads(self.files["diagnostics"].read_text())
            if report.get("manifest_hash") == self.manifest.hash and "modes" in report:
                return report["modes"]["selected_chains"]
        return list(range(self.draws.n_chains))


def _pooled_loo(model: FertilityModel, samples) -> diagnostics.LooResult:
    flat = np.asarray(samples).reshape(-1, samples.shape[-1])
    return diagnostics.psis_loo(model.pointwise_loglik(flat))


def _looic_fn(model: FertilityModel, samples):
    """LOOIC of a chain group for the mode tie-break; None when the group is too small for PSIS."""

    def looic(chains):
        if len(chains) * samples.shape[1] < 100:
            log.warning("chain group %s has fewer than 100 draws; LOOIC tie-break skipped", chains)
            return None
        return _pooled_loo(model, samples[chains]).looic

    return looic


def _points(model: FertilityModel) -> list[tuple[int, int]]:
    """(cohort, youngest age) coordinates of the observed cells."""
    data = model.data
    return [(int(data.cohorts[c]), int(data.grid.min_ages[k])) for c, k in zip(model.obs_cohort, model.obs_cell)]


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    cfg = load_config(args)
    data = cio.load_dataset(args.births, args.exposure, args.data, cfg.grid())
    if args.jumpoff is not None:
        data = truncate(data, args.jumpoff)
    fit_run(data, cfg, sampler_config(args), args.out, command=" ".join(sys.argv))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    run = Run(args.run)
    model, draws = run.model, run.draws
    loo = partition = None
    chains = list(range(draws.n_chains))
    if draws.n_chains >= 2:
        partition = diagnostics.mode_partition(draws.samples, _looic_fn(model, draws.samples))
        chains = partition.chains
    if len(chains) * draws.n_draws >= 100:
        loo = _pooled_loo(model, draws.samples[chains])
    else:
        log.warning("fewer than 100 retained draws; PSIS-LOO skipped")
    if args.refit and loo is not None and loo.flagged.any():
        scfg = draws.config

        def refit(batch):
            weights = np.ones(model.n_obs)
            weights[batch] = 0.0
            sub = run_chains(model.with_weights(weights), scfg)
            return model.pointwise_loglik(sub.flat())[:, batch]

        loo = diagnostics.apply_refits(loo, _points(model), refit)
    report = diagnostics.diagnostic_report(draws, loo, partition, run.manifest.hash)
    out = args.out or run.files["diagnostics"]
    diagnostics.write_report(report, out)
    log.info("max R-hat %s, %d divergences", report["max_rhat"], draws.n_divergent)
    return EXIT_OK


def read_exposure_schedule(path: Path, data: FertilityDataset) -> np.ndarray:
    out = np.full(data.grid.n_ages, np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            age = int(cio.parse_age_label(row["age"])[0])
            out[data.grid.age_index(int(np.clip(age, data.grid.ages[0], data.grid.ages[-1])))] = float(row["exposure"])
    if np.any(np.isnan(out)) or np.any(out <= 0):
        raise CliError("exposure schedule must give a positive exposure for every age")
    return out


def cmd_forecast(args) -> int:
    run = Run(args.run)
    if args.horizon < 0:
        raise CliError("--horizon must be non-negative")
    chains = list(range(run.draws.n_chains)) if args.all_chains else run.selected_chains()
    samples = run.draws.samples[chains].reshape(-1, run.draws.dim)
    post = forecast.posterior_rates(samples, run.data, run.config, args.horizon, args.seed)
    schedule = read_exposure_schedule(args.exposure_schedule, run.data) if args.exposure_schedule else forecast.default_exposure(run.data)
    pred = forecast.predictive_cell_rates(post, schedule, args.seed)
    meta = {
        "manifest_hash": run.manifest.hash,
        "config_hash": run.manifest.config_hash,
        "families": [str(run.config.family1), str(run.config.family2)],
        "horizon": args.horizon,
        "seed": args.seed,
        "chains": chains,
        "n_draws": post.n_draws,
    }
    summary = forecast.forecast_summary(post, pred, metadata=meta)
    out = args.out or run.path / "forecast.csv"
    summary.write(out)
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    data = cio.load_dataset(args.births, args.exposure, args.data, cfg.grid())
    hs = evaluate.split(data, args.jumpoff, args.holdout_years)
    cells = evaluate.eval_cells(hs.evaluation)
    scfg = sampler_config(args)
    draws = fit_run(hs.fit, cfg, scfg, args.out / "fit", command=" ".join(sys.argv))
    samples = draws.samples
    if draws.n_chains >= 2:
        model = FertilityModel(hs.fit, cfg)
        part = diagnostics.mode_partition(samples, _looic_fn(model, samples))
        samples = samples[part.chains]
    horizon = max(0, int(cells.cohorts.max() - hs.fit.cohorts[-1]))
    post = forecast.posterior_rates(samples.reshape(-1, draws.dim), hs.fit, cfg, horizon, args.seed)
    label = f"{cfg.family1}/{cfg.family2}"
    index = {int(c): i for i, c in enumerate(post.cohorts)}
    rate_draws = evaluate.expected_cell_rates(post.f_ages, cells, index)
    pred_draws = evaluate.predictive_cell_draws(post.f_ages, post.log_dispersion, cells, index, args.seed)
    scores = [evaluate.score_draws(label, rate_draws, pred_draws, cells.rates)]
    scores.append(evaluate.baseline_score("freeze-rate", evaluate.freeze_rate(hs.fit, cells.keys), cells))
    try:
        scores.append(evaluate.baseline_score("freeze-slope", evaluate.freeze_slope(hs.fit, cells.keys), cells))
    except ValueError as exc:
        log.warning("freeze-slope baseline skipped: %s", exc)
    report = args.out / "evaluation.csv"
    evaluate.write_report({args.label: scores}, report)
    manifest = cio.RunManifest.read(args.out / "fit" / RUN_FILES["manifest"])
    cio.write_sidecar(report, manifest.hash, jumpoff=args.jumpoff, holdout_years=args.holdout_years)
    for s in scores:
        log.info("%s: RMSE %.5f %s", s.model, s.rmse, s.coverage)
    return EXIT_OK


def synthetic_truth(n_cohorts: int) -> tuple[CohortParams, float]:
    """Smooth parameter trajectory used for recovery studies: level drifting 1.8 -> 2.1."""
    n = n_cohorts
    params = CohortParams(
        np.linspace(1.8, 2.1, n),
        np.full(n, 0.3),
        np.linspace(54.0, 56.0, n),
        np.full(n, 10.0),
        np.full(n, 4.0),
        np.full(n, 5.0),
    )
    return params, 4.0


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    params, log_disp = synthetic_truth(args.cohorts)
    cohorts = args.first_cohort + np.arange(args.cohorts)
    data = cio.simulate_dataset(params, cohorts, args.exposure_level, log_disp, args.seed, cfg.family1, cfg.family2, cfg.grid(), args.jumpoff)
    cio.write_canonical(data, args.out)
    truth = {"cohorts": cohorts.tolist(), "log_dispersion": log_disp, "seed": args.seed}
    truth.update({k: np.asarray(v).tolist() for k, v in vars(params).items()})
    Path(str(args.out) + ".truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    return EXIT_OK


def cmd_print_config(args) -> int:
    sys.stdout.write(load_config(args).to_text())
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SamplerAbort as exc:
        log.error("sampler aborted: %s", exc)
        return EXIT_ABORT
    except (ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
