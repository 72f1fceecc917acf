"""Scenario grid, replication engine and performance measures for the
simulation study comparing M1, M2, M3-unadj and M3-adj."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import MetaDataset, ProportionPrior, ValidationError
from .mcmc import SamplerConfig, run_sampler, summarize
from .models import ModelKind, bind
from .survival import CoxError, GenerationParams, generate_trial, make_study_record

__all__ = [
    "ScenarioSpec",
    "MethodPerformance",
    "PerformanceReport",
    "METHODS",
    "scenario_table",
    "get_scenario",
    "generate_meta_replication",
    "run_scenario",
    "RESULTS_HEADER",
    "REPORT_HEADER",
]

log = logging.getLogger(__name__)

METHODS = ("M1", "M2", "M3-unadj", "M3-adj")
RESULTS_HEADER = ["scenario", "replication", "method", "d_pos_est", "cri_lo", "cri_hi", "converged", "d_pos_true"]
REPORT_HEADER = ["scenario", "method", "pct_bias", "coverage", "mean_width", "mcse_bias", "n_reps"]

RHAT_GATE = 1.05
MAX_REGEN_PER_SCENARIO = 100


@dataclass(frozen=True)
class ScenarioSpec:
    """One row of the scenario grid plus the trial-generation constants."""

    scenario_id: str
    group: str
    n_studies: int
    n_studies_pos: int
    n_studies_both: int
    n_studies_mix: int
    mu_beta: float
    tau_beta_sq: float
    d_pos: float = -0.25
    tau_pos_sq: float = 0.0056
    n_participants: int = 350
    p_trt: float = 0.5
    baseline_rate: float = 0.15
    p_neg_prior: ProportionPrior = field(default_factory=lambda: ProportionPrior(9.2, 13.8))

    def __post_init__(self):
        if self.n_studies_pos + self.n_studies_both + self.n_studies_mix != self.n_studies:
            raise ValidationError(
                f"{self.scenario_id}: block sizes "
                f"{self.n_studies_pos}+{self.n_studies_both}+{self.n_studies_mix} "
                f"!= n_studies={self.n_studies}"
            )


def scenario_table() -> list[ScenarioSpec]:
    """The 21-scenario grid: S1 is the base case, groups vary one thing at a time."""
    rows = [
        # id, group, n, n_pos, n_both, n_mix, mu_beta, tau_beta_sq
        ("S1", "1-5", 15, 5, 5, 5, 0.25, 0.01),
        ("S2", "1", 15, 4, 6, 5, 0.25, 0.01),
        ("S3", "1", 15, 3, 7, 5, 0.25, 0.01),
        ("S4", "1", 15, 2, 8, 5, 0.25, 0.01),
        ("S5", "1", 15, 1, 9, 5, 0.25, 0.01),
        ("S6", "2", 15, 4, 5, 6, 0.25, 0.01),
        ("S7", "2", 15, 3, 5, 7, 0.25, 0.01),
        ("S8", "2", 15, 2, 5, 8, 0.25, 0.01),
        ("S9", "2", 15, 1, 5, 9, 0.25, 0.01),
        ("S10", "3", 15, 5, 5, 5, 0.5, 0.01),
        ("S11", "3", 15, 5, 5, 5, 0.75, 0.01),
        ("S12", "3", 15, 5, 5, 5, 1.0, 0.01),
        ("S13", "3", 15, 5, 5, 5, 1.25, 0.01),
        ("S14", "4", 15, 5, 5, 5, 0.25, 0.05),
        ("S15", "4", 15, 5, 5, 5, 0.25, 0.1),
        ("S16", "4", 15, 5, 5, 5, 0.25, 0.2),
        ("S17", "4", 15, 5, 5, 5, 0.25, 0.3),
        ("S18", "5", 9, 3, 3, 3, 0.25, 0.01),
        ("S19", "5", 30, 10, 10, 10, 0.25, 0.01),
        ("S20", "5", 60, 20, 20, 20, 0.25, 0.01),
        ("S21", "5", 90, 30, 30, 30, 0.25, 0.01),
    ]
    return [
        ScenarioSpec(sid, grp, n, np_, nb, nm, mu, tb2)
        for sid, grp, n, np_, nb, nm, mu, tb2 in rows
    ]


def get_scenario(scenario_id: str) -> ScenarioSpec:
    for spec in scenario_table():
        if spec.scenario_id == scenario_id.upper():
            return spec
    raise ValidationError(f"unknown scenario '{scenario_id}' (S1..S21)")


def generate_meta_replication(
    spec: ScenarioSpec, rng: np.random.Generator, max_regen: int = MAX_REGEN_PER_SCENARIO
) -> tuple[MetaDataset, MetaDataset, dict]:
    """Draw one replication's true effects and IPD-derived study records.

    Returns two datasets differing only in the mixed studies' effect source
    (treatment-only vs biomarker-adjusted pooled Cox fit) plus the truths.
    Trials whose Cox fits fail are regenerated from the ongoing RNG stream,
    at most ``max_regen`` times in total.
    """
    n = spec.n_studies
    delta_pos = rng.normal(spec.d_pos, math.sqrt(spec.tau_pos_sq), size=n)
    beta = rng.normal(spec.mu_beta, math.sqrt(spec.tau_beta_sq), size=n)
    delta_neg = delta_pos + beta

    records_unadj = []
    records_adj = []
    regen = 0
    for i in range(n):
        if i < spec.n_studies_pos:
            reporting = "positive"
        elif i < spec.n_studies_pos + spec.n_studies_both:
            reporting = "both"
        else:
            reporting = "mixed"
        params = GenerationParams(
            delta_pos=float(delta_pos[i]),
            delta_neg=float(delta_neg[i]),
            n_participants=spec.n_participants,
            p_trt=spec.p_trt,
            baseline_rate=spec.baseline_rate,
            p_neg_prior=spec.p_neg_prior,
        )
        study_id = f"study_{i + 1:02d}"
        while True:
            try:
                ipd = generate_trial(params, rng)
                if reporting == "mixed":
                    rec_u = make_study_record(ipd, "mixed", study_id, adjusted=False)
                    rec_a = make_study_record(ipd, "mixed", study_id, adjusted=True)
                else:
                    rec_u = make_study_record(ipd, reporting, study_id)
                    rec_a = rec_u
                break
            except (CoxError, ValidationError) as exc:
                regen += 1
                log.warning("%s study %s regenerated (%s)", spec.scenario_id, study_id, exc)
                if regen > max_regen:
                    raise RuntimeError(
                        f"{spec.scenario_id}: exceeded {max_regen} trial regenerations"
                    ) from exc
        records_unadj.append(rec_u)
        records_adj.append(rec_a)

    truths = {
        "d_pos": spec.d_pos,
        "delta_pos": delta_pos,
        "beta": beta,
        "delta_neg": delta_neg,
        "n_regenerated": regen,
    }
    return MetaDataset.from_studies(records_unadj), MetaDataset.from_studies(records_adj), truths


_METHOD_KIND = {
    "M1": ModelKind.M1,
    "M2": ModelKind.M2,
    "M3-unadj": ModelKind.M3,
    "M3-adj": ModelKind.M3,
}


def _gate_params(summary) -> list[str]:
    return [n for n in ("d_pos", "tau_pos", "mu_beta", "tau_beta") if n in summary]


def run_replication(
    spec: ScenarioSpec,
    replication: int,
    seed: int,
    config: SamplerConfig,
    methods=METHODS,
) -> list[dict]:
    """Generate one replication and fit every requested method on it."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(replication,))
    data_ss, sampler_ss = ss.spawn(2)
    rng = np.random.Generator(np.random.Philox(data_ss))
    ds_unadj, ds_adj, truths = generate_meta_replication(spec, rng)
    sampler_seeds = sampler_ss.generate_state(len(methods))

    rows = []
    for j, method in enumerate(methods):
        dataset = ds_adj if method == "M3-adj" else ds_unadj
        model = bind(_METHOD_KIND[method], dataset)
        cfg = SamplerConfig(
            n_chains=config.n_chains,
            burn_in=config.burn_in,
            samples=config.samples,
            thin=config.thin,
            seed=int(sampler_seeds[j]),
            adapt_window=config.adapt_window,
        )
        summary = summarize(run_sampler(model, cfg))
        d = summary["d_pos"]
        max_rhat = summary.max_rhat(_gate_params(summary))
        rows.append(
            {
                "scenario": spec.scenario_id,
                "replication": replication,
                "method": method,
                "d_pos_est": d.mean,
                "cri_lo": d.q2_5,
                "cri_hi": d.q97_5,
                "converged": int(not math.isnan(max_rhat) and max_rhat < RHAT_GATE),
                "d_pos_true": truths["d_pos"],
            }
        )
    return rows


@dataclass(frozen=True)
class MethodPerformance:
    pct_bias: float
    coverage: float
    mean_width: float
    mcse_bias: float
    mcse_coverage: float
    mcse_width: float
    n_reps: int
    n_nonconverged: int

    @property
    def flagged_nonconverged(self) -> bool:
        return self.n_nonconverged > 0.05 * self.n_reps


@dataclass(frozen=True)
class PerformanceReport:
    scenario_id: str
    methods: dict[str, MethodPerformance]

    def to_csv(self) -> str:
        lines = [",".join(REPORT_HEADER)]
        for method in METHODS:
            if method not in self.methods:
                continue
            m = self.methods[method]
            lines.append(
                f"{self.scenario_id},{method},{m.pct_bias:.6g},{m.coverage:.6g},"
                f"{m.mean_width:.6g},{m.mcse_bias:.6g},{m.n_reps}"
            )
        return "\n".join(lines) + "\n"


def aggregate_rows(scenario_id: str, rows: list[dict]) -> PerformanceReport:
    """Compute performance measures from per-replication result rows.

    Rows are sorted before summation (compensated via math.fsum) so the
    report does not depend on completion order.
    """
    methods = {}
    deduped: dict[tuple, dict] = {}
    for row in rows:
        if row["scenario"] != scenario_id:
            continue
        deduped[(int(row["replication"]), str(row["method"]))] = row
    by_method: dict[str, list[dict]] = {}
    for key in sorted(deduped):
        row = deduped[key]
        by_method.setdefault(str(row["method"]), []).append(row)
    for method, mrows in by_method.items():
        truth = float(mrows[0]["d_pos_true"])
        if truth == 0.0:
            raise ValidationError("zero truth: use absolute bias")
        n = len(mrows)
        biases = [100.0 * (float(r["d_pos_est"]) - truth) / truth for r in mrows]
        covered = [1.0 if float(r["cri_lo"]) <= truth <= float(r["cri_hi"]) else 0.0 for r in mrows]
        widths = [float(r["cri_hi"]) - float(r["cri_lo"]) for r in mrows]
        nonconv = sum(1 for r in mrows if not int(r["converged"]))
        bias = math.fsum(biases) / n
        cov = math.fsum(covered) / n
        width = math.fsum(widths) / n
        var_b = math.fsum((b - bias) ** 2 for b in biases) / max(n - 1, 1)
        var_w = math.fsum((w - width) ** 2 for w in widths) / max(n - 1, 1)
        methods[method] = MethodPerformance(
            pct_bias=bias,
            coverage=cov,
            mean_width=width,
            mcse_bias=math.sqrt(var_b / n),
            mcse_coverage=math.sqrt(cov * (1.0 - cov) / n),
            mcse_width=math.sqrt(var_w / n),
            n_reps=n,
            n_nonconverged=nonconv,
        )
    return PerformanceReport(scenario_id=scenario_id, methods=methods)


def _read_results(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    return rows


def run_scenario(
    spec: ScenarioSpec,
    n_replications: int,
    config: SamplerConfig,
    seed: int,
    workers: int = 1,
    results_path=None,
    resume: bool = False,
    methods=METHODS,
) -> PerformanceReport:
    """Run (or resume) a scenario's replications and aggregate performance.

    Per-replication results stream into ``results_path`` (if given) in
    replication order, keyed by (scenario, replication, method) so a crashed
    run can resume without refitting finished replications.
    """
    if n_replications < 2:
        raise ValidationError("n_replications must be >= 2")
    existing: list[dict] = []
    done_reps: set[int] = set()
    path = Path(results_path) if results_path else None
    if path is not None and path.exists():
        if not resume:
            raise ValidationError(f"{path} exists; pass resume=True to continue into it")
        all_rows = _read_results(path)
        existing = [r for r in all_rows if r["scenario"] == spec.scenario_id]
        by_rep: dict[int, set] = {}
        for r in existing:
            by_rep.setdefault(int(r["replication"]), set()).add(r["method"])
        done_reps = {rep for rep, ms in by_rep.items() if set(methods) <= ms}

    todo = [rep for rep in range(n_replications) if rep not in done_reps]
    collected: list[dict] = [r for r in existing if int(r["replication"]) < n_replications]

    fh = writer = None
    if path is not None:
        new_file = not path.exists()
        fh = open(path, "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new_file:
            writer.writerow(RESULTS_HEADER)
            fh.flush()

    pending: dict[int, list[dict]] = {}
    next_to_write = 0

    def record(rep: int, rows: list[dict]):
        nonlocal next_to_write
        collected.extend(rows)
        if writer is not None:
            pending[rep] = rows
            while next_to_write in done_reps or next_to_write in pending:
                if next_to_write in pending:
                    for row in pending.pop(next_to_write):
                        writer.writerow([_fmt_cell(row[c]) for c in RESULTS_HEADER])
                    fh.flush()
                next_to_write += 1

    try:
        if workers <= 1 or len(todo) <= 1:
            for rep in todo:
                record(rep, run_replication(spec, rep, seed, config, methods))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {
                    pool.submit(run_replication, spec, rep, seed, config, methods): rep
                    for rep in todo
                }
                remaining = set(futures)
                while remaining:
                    finished, remaining = wait(remaining, return_when=FIRST_COMPLETED)
                    for fut in finished:
                        record(futures[fut], fut.result())
    finally:
        if fh is not None:
            fh.close()

    return aggregate_rows(spec.scenario_id, collected)


def _fmt_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)  # shortest roundtrip form, so resume is lossless
    return str(value)
