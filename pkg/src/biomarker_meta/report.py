"""Reproduce the example analysis: fitted summary tables plus a forest plot."""

from __future__ import annotations

import math
from pathlib import Path

from .data_model import MetaDataset, load_bundled
from .forest import ForestRow, render_forest
from .mcmc import SamplerConfig, SamplerError, run_sampler, summarize
from .models import ModelKind, bind

__all__ = ["ConvergenceError", "reproduce_example", "summary_table_csv", "pooled_forest_rows"]

TABLE_PARAMS = ("d_pos", "tau_pos_sq", "mu_beta", "tau_beta_sq")
EXAMPLE_MODELS = (ModelKind.M1, ModelKind.M2, ModelKind.M3)
MODEL_LABELS = {ModelKind.M1: "M1", ModelKind.M2: "M2", ModelKind.M3: "M3"}
RHAT_GATE = 1.05
_Z95 = 1.959963984540054


class ConvergenceError(SamplerError):
    """A fit failed the split R-hat gate."""


def _dataset_name(outcome: str, variant: str) -> str:
    outcome = outcome.lower()
    variant = variant.lower()
    if outcome not in ("os", "pfs"):
        raise ValueError(f"outcome must be 'os' or 'pfs', got '{outcome}'")
    if variant not in ("main", "sensitivity"):
        raise ValueError(f"variant must be 'main' or 'sensitivity', got '{variant}'")
    return f"mcrc_{outcome}_{'main' if variant == 'main' else 'sens'}"


def summary_table_csv(summaries: dict, hr_scale: bool = False) -> str:
    """Wide table: one row per reported parameter, columns per model.

    Location rows (d_pos, mu_beta) can be exponentiated to the ratio scale
    with ``hr_scale``; variance rows are always left on the log-effect scale.
    """
    labels = [MODEL_LABELS[k] for k in EXAMPLE_MODELS if k in summaries]
    header = ["parameter"]
    for lab in labels:
        low = lab.lower()
        header += [f"{low}_mean", f"{low}_median", f"{low}_lo", f"{low}_hi"]
    lines = [",".join(header)]
    for param in TABLE_PARAMS:
        cells = [param]
        for kind in EXAMPLE_MODELS:
            if kind not in summaries:
                continue
            summary = summaries[kind]
            if param not in summary:
                cells += ["NA"] * 4
                continue
            row = summary[param]
            vals = [row.mean, row.median, row.q2_5, row.q97_5]
            if hr_scale and param in ("d_pos", "mu_beta"):
                vals = [math.exp(v) for v in vals]
            cells += [format(v, ".6g") for v in vals]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def observed_forest_rows(dataset: MetaDataset) -> list[ForestRow]:
    rows = []
    for s in dataset.studies:
        for population, est in (
            ("positive", s.positive),
            ("negative", s.negative),
            ("mixed", s.mixed),
        ):
            if est is None:
                continue
            rows.append(
                ForestRow(
                    label=f"{s.study_id} ({population})",
                    estimate=est.y,
                    lower=est.y - _Z95 * est.se,
                    upper=est.y + _Z95 * est.se,
                    population=population,
                )
            )
    return rows


def pooled_forest_rows(summaries: dict) -> list[ForestRow]:
    rows = []
    for kind in EXAMPLE_MODELS:
        if kind not in summaries:
            continue
        d = summaries[kind]["d_pos"]
        rows.append(
            ForestRow(
                label="pooled positive-subgroup effect",
                estimate=d.mean,
                lower=d.q2_5,
                upper=d.q97_5,
                population="pooled",
                model=MODEL_LABELS[kind],
            )
        )
    return rows


def reproduce_example(
    outcome: str,
    variant: str,
    config: SamplerConfig,
    out_dir,
    hr_scale: bool = False,
    dump_chains: bool = False,
) -> dict:
    """Fit M1, M2 and M3 to a bundled dataset and write the output artifacts.

    Writes ``<outcome>_<variant>_table.csv`` and ``<outcome>_<variant>_forest.svg``
    into ``out_dir`` (plus per-chain dumps when asked). Raises
    :class:`ConvergenceError` if any fit fails the R-hat gate.
    """
    name = _dataset_name(outcome, variant)
    dataset = load_bundled(name)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    summaries = {}
    for offset, kind in enumerate(EXAMPLE_MODELS):
        model = bind(kind, dataset)
        cfg = SamplerConfig(
            n_chains=config.n_chains,
            burn_in=config.burn_in,
            samples=config.samples,
            thin=config.thin,
            seed=config.seed + offset,
            adapt_window=config.adapt_window,
        )
        chains = run_sampler(model, cfg)
        summary = summarize(chains)
        gate = [p for p in ("d_pos", "tau_pos", "mu_beta", "tau_beta") if p in summary]
        worst = summary.max_rhat(gate)
        if math.isnan(worst) or worst >= RHAT_GATE:
            raise ConvergenceError(
                f"{MODEL_LABELS[kind]} on {name}: max split R-hat {worst:.3f} "
                f"exceeds the {RHAT_GATE} gate; increase burn-in/samples"
            )
        if dump_chains:
            chains.dump_csv(out_dir / f"{name}_{MODEL_LABELS[kind].lower()}_chains")
        summaries[kind] = summary

    stem = f"{outcome.lower()}_{'main' if variant.lower() == 'main' else 'sensitivity'}"
    table_path = out_dir / f"{stem}_table.csv"
    table_path.write_text(summary_table_csv(summaries, hr_scale=hr_scale))
    rows = observed_forest_rows(dataset) + pooled_forest_rows(summaries)
    svg_path = out_dir / f"{stem}_forest.svg"
    render_forest(rows, svg_path, title=f"{outcome.upper()} ({variant})")
    return {"summaries": summaries, "table": table_path, "forest": svg_path}
