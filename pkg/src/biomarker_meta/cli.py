"""Command-line interface.

Exit codes: 0 success, 2 validation/usage error, 3 sampler or convergence
failure, 4 I/O error. A flat ``key = value`` config file can supply defaults
for any flag (dest name); explicit flags win. ``BIOMARKER_META_SEED`` and
``BIOMARKER_META_WORKERS`` set the default seed and worker count.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data_model import BUNDLED_DATASETS, DataError, parse_dataset
from .forest import ForestRow, render_forest
from .mcmc import DEFAULT_SEED, SamplerConfig, SamplerError, run_sampler, summarize
from .models import ModelKind, bind
from .priors import beta_from_counts, beta_from_moments, beta_from_range
from .report import reproduce_example
from .simstudy import METHODS, REPORT_HEADER, get_scenario, run_scenario, scenario_table
from .survival import GenerationParams, generate_trial

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


def _env_int(name: str, fallback: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"environment variable {name}={raw!r} is not an integer") from None


def _typed(value: str):
    text = value.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; keys are flag dests."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{ln}: expected 'key = value', got '{line.rstrip()}'")
        key, raw = stripped.split("=", 1)
        values[key.strip().replace("-", "_")] = _typed(raw)
    return values


def _add_sampler_flags(parser, default_seed):
    parser.add_argument("--chains", type=int, default=4, help="number of chains")
    parser.add_argument("--burn-in", type=int, default=50_000, dest="burn_in")
    parser.add_argument("--samples", type=int, default=100_000, help="kept iterations per chain")
    parser.add_argument("--thin", type=int, default=1)
    parser.add_argument("--seed", type=int, default=default_seed)
    parser.add_argument(
        "--preset",
        choices=["paper", "desk"],
        default=None,
        help="shortcut for run lengths: paper=50k/100k, desk=5k/20k",
    )


def _sampler_config(args) -> SamplerConfig:
    if args.preset == "desk":
        return SamplerConfig.desk_scale(seed=args.seed)
    if args.preset == "paper":
        return SamplerConfig.paper_scale(seed=args.seed)
    return SamplerConfig(
        n_chains=args.chains,
        burn_in=args.burn_in,
        samples=args.samples,
        thin=args.thin,
        seed=args.seed,
    )


def build_parser(default_seed: int, default_workers: int) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biomarker-meta",
        description="Biomarker-subgroup meta-analysis models and simulation harness",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="key = value defaults file")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit one model to a dataset CSV")
    p_fit.add_argument("--model", required=True, choices=[k.value for k in ModelKind])
    p_fit.add_argument("--data", required=True, help="dataset CSV, or bundled name "
                       f"({', '.join(BUNDLED_DATASETS)})")
    p_fit.add_argument("--outcome-label", default="", dest="outcome_label")
    _add_sampler_flags(p_fit, default_seed)
    p_fit.add_argument("--out", required=True, help="summary CSV path")
    p_fit.add_argument("--dump-chains", default=None, dest="dump_chains", help="directory for per-chain CSVs")

    p_priors = sub.add_parser("priors", help="method-of-moments beta priors")
    priors_sub = p_priors.add_subparsers(dest="priors_command", required=True)
    p_mom = priors_sub.add_parser("moments", help="fit Beta(alpha, beta) by matching moments")
    p_mom.add_argument("--mean", type=float, default=None)
    p_mom.add_argument("--var", type=float, default=None)
    p_mom.add_argument("--counts", type=int, nargs=2, metavar=("K", "N"), default=None)
    p_mom.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), default=None, dest="prange")

    p_sim = sub.add_parser("simulate", help="survival-trial and study simulation")
    sim_sub = p_sim.add_subparsers(dest="simulate_command", required=True)

    p_trial = sim_sub.add_parser("trial", help="generate one trial's IPD")
    p_trial.add_argument("--delta-pos", type=float, required=True, dest="delta_pos")
    p_trial.add_argument("--delta-neg", type=float, required=True, dest="delta_neg")
    p_trial.add_argument("--n", type=int, default=350)
    p_trial.add_argument("--lambda", type=float, default=0.15, dest="baseline_rate")
    p_trial.add_argument("--p-trt", type=float, default=0.5, dest="p_trt")
    p_trial.add_argument("--censor-time", type=float, default=None, dest="censor_time")
    p_trial.add_argument("--seed", type=int, default=default_seed)
    p_trial.add_argument("--out", required=True, help="IPD CSV path")

    p_study = sim_sub.add_parser("study", help="run simulation-study scenarios")
    p_study.add_argument("--scenario", default="S1", help="S1..S21 or 'all'")
    p_study.add_argument("--reps", type=int, default=100)
    p_study.add_argument("--seed", type=int, default=default_seed)
    p_study.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p_study.add_argument("--out", required=True, help="per-replication results CSV")
    p_study.add_argument("--report", default=None, help="performance report CSV "
                         "(default: <out>_report.csv)")
    p_study.add_argument("--resume", action="store_true")
    p_study.add_argument("--workers", type=int, default=default_workers)

    p_rep = sub.add_parser("reproduce-example", help="fit M1/M2/M3 to a bundled dataset")
    p_rep.add_argument("--outcome", required=True, choices=["pfs", "os"])
    p_rep.add_argument("--variant", default="main", choices=["main", "sensitivity"])
    _add_sampler_flags(p_rep, default_seed)
    p_rep.add_argument("--out-dir", required=True, dest="out_dir")
    p_rep.add_argument("--hr-scale", action="store_true", dest="hr_scale")
    p_rep.add_argument("--dump-chains", action="store_true", dest="dump_chains")

    p_forest = sub.add_parser("render-forest", help="render a forest SVG from a rows CSV")
    p_forest.add_argument("--rows", required=True, help="CSV: label,estimate,lower,upper,population,model")
    p_forest.add_argument("--out", required=True)
    p_forest.add_argument("--title", default="")
    return parser


def _cmd_fit(args) -> int:
    data_arg = args.data
    if data_arg in BUNDLED_DATASETS:
        from .data_model import load_bundled

        dataset = load_bundled(data_arg)
    else:
        dataset = parse_dataset(Path(data_arg).read_text())
    model = bind(ModelKind.from_string(args.model), dataset)
    chains = run_sampler(model, _sampler_config(args))
    summary = summarize(chains)
    label = args.outcome_label
    lines = ["outcome,parameter,mean,median,sd,cri_lo,cri_hi,rhat,ess"]
    for body in summary.to_csv().splitlines()[1:]:
        lines.append(f"{label},{body}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    if args.dump_chains:
        chains.dump_csv(args.dump_chains)
    return EXIT_OK


def _cmd_priors_moments(args) -> int:
    chosen = [x is not None for x in (args.mean, args.counts, args.prange)]
    if sum(chosen) != 1:
        raise DataError("pass exactly one of --mean/--var, --counts K N, --range LO HI")
    if args.mean is not None:
        if args.var is None:
            raise DataError("--mean requires --var")
        prior = beta_from_moments(args.mean, args.var)
    elif args.counts is not None:
        prior = beta_from_counts(args.counts[0], args.counts[1])
    else:
        prior = beta_from_range(args.prange[0], args.prange[1])
    print(f"alpha={prior.alpha:.6g} beta={prior.beta:.6g}")
    return EXIT_OK


def _cmd_simulate_trial(args) -> int:
    params = GenerationParams(
        delta_pos=args.delta_pos,
        delta_neg=args.delta_neg,
        n_participants=args.n,
        p_trt=args.p_trt,
        baseline_rate=args.baseline_rate,
        censor_time=args.censor_time,
    )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed)))
    ipd = generate_trial(params, rng)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "time", "event", "trt", "biomarker_negative"])
        for i in range(ipd.n):
            writer.writerow(
                [
                    i + 1,
                    format(ipd.time[i], ".10g"),
                    int(ipd.event[i]),
                    int(ipd.trt[i]),
                    int(ipd.biomarker_negative[i]),
                ]
            )
    return EXIT_OK


def _cmd_simulate_study(args) -> int:
    if args.scenario.lower() == "all":
        specs = scenario_table()
    else:
        specs = [get_scenario(args.scenario)]
    config = SamplerConfig.desk_scale() if args.preset == "desk" else SamplerConfig.paper_scale()
    report_path = args.report or (str(Path(args.out).with_suffix("")) + "_report.csv")
    reports = []
    for i, spec in enumerate(specs):
        reports.append(
            run_scenario(
                spec,
                n_replications=args.reps,
                config=config,
                seed=args.seed,
                workers=max(1, args.workers),
                results_path=args.out,
                # later scenarios of this invocation append to the file the
                # first one opened; pre-existing files still need --resume
                resume=args.resume or i > 0,
            )
        )
    lines = [",".join(REPORT_HEADER)]
    for rep in reports:
        lines.extend(rep.to_csv().splitlines()[1:])
    Path(report_path).write_text("\n".join(lines) + "\n")
    for rep in reports:
        for method in METHODS:
            if method in rep.methods and rep.methods[method].flagged_nonconverged:
                print(
                    f"warning: {rep.scenario_id}/{method} failed the R-hat gate in "
                    f"{rep.methods[method].n_nonconverged}/{rep.methods[method].n_reps} replications",
                    file=sys.stderr,
                )
    return EXIT_OK


def _cmd_reproduce_example(args) -> int:
    reproduce_example(
        outcome=args.outcome,
        variant=args.variant,
        config=_sampler_config(args),
        out_dir=args.out_dir,
        hr_scale=args.hr_scale,
        dump_chains=args.dump_chains,
    )
    return EXIT_OK


def _cmd_render_forest(args) -> int:
    rows = []
    with open(args.rows, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                ForestRow(
                    label=rec["label"],
                    estimate=float(rec["estimate"]),
                    lower=float(rec["lower"]),
                    upper=float(rec["upper"]),
                    population=rec.get("population") or "positive",
                    model=rec.get("model") or "",
                )
            )
    render_forest(rows, args.out, title=args.title)
    return EXIT_OK


_COMMANDS = {
    "fit": _cmd_fit,
    "reproduce-example": _cmd_reproduce_example,
    "render-forest": _cmd_render_forest,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        default_seed = _env_int("BIOMARKER_META_SEED", DEFAULT_SEED)
        default_workers = _env_int("BIOMARKER_META_WORKERS", 1)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    parser = build_parser(default_seed, default_workers)
    args, _ = parser.parse_known_args(argv)
    if args.config:
        try:
            parser.set_defaults(**read_config_file(args.config))
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        except TypeError as exc:
            print(f"error: bad config key: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
    args = parser.parse_args(argv)

    try:
        if args.command == "priors":
            return _cmd_priors_moments(args)
        if args.command == "simulate":
            if args.simulate_command == "trial":
                return _cmd_simulate_trial(args)
            return _cmd_simulate_study(args)
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SamplerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
