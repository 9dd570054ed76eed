"""Monte Carlo study orchestration.

Runs replications over a grid of simulation conditions, fits each generated
dataset under every threshold-prior specification in the plan, and
aggregates coverage, credible-interval width, and convergence summaries by
parameter class.

Bookkeeping conventions: first thresholds of items simulated with an empty
category form their own parameter class; they are excluded from coverage
(their generating value of -15 is a device for emptying the category, and a
well-behaved interval should not contain it) while their CI widths are
aggregated like any other class.  Replications whose fit aborts are
recorded and skipped; aggregates average over completers only.

Seeds: each (cell, replication) pair derives a dataset seed, and each prior
adds its own sampler seed, both through named seed-sequence spawning, so
any single cell or replication reruns identically in isolation and results
do not depend on worker count or scheduling order.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .diagnostics import summarize_draws
from .model_core import Posterior
from .priors import PriorConfig
from .sampler import SamplerConfig, run_chains
from .simgen import PopulationParams, SimCondition, generate_dataset

PARAMETER_CLASSES = (
    "loadings",
    "factor variances",
    "factor covariance",
    "thresholds",
    "empty-category threshold",
)


@dataclass(frozen=True)
class PriorSpec:
    """A labeled threshold-prior configuration to compare in a study."""

    label: str
    config: PriorConfig


def default_prior_specs():
    """The three specifications every study contrast is built around.

    The joint prior uses the logistic CDF approximation in the probability
    map: its exponential tails keep meaningful prior mass on extreme
    thresholds, which is what lets an unendorsed category keep a usable
    interval instead of being pinched by the Gaussian tail of the exact
    map.  The exact variant remains the library default elsewhere.
    """
    return (
        PriorSpec("Joint", PriorConfig.induced(alpha=1.0,
                                               cdf_variant="logistic-approx")),
        PriorSpec("Small Variance", PriorConfig.sequential(mu=0.0, dispersion=1.5)),
        PriorSpec("Large Variance", PriorConfig.sequential(mu=0.0, dispersion=1e5)),
    )


@dataclass(frozen=True)
class StudyPlan:
    """Everything needed to run one Monte Carlo study."""

    conditions: tuple
    priors: tuple
    replications: int
    base_seed: int = 0
    n_workers: int = 1
    sampler: SamplerConfig = SamplerConfig(
        n_chains=2, n_warmup=500, n_sampling=500, init="zero")

    def __post_init__(self):
        if not self.conditions:
            raise ValueError("plan needs at least one condition")
        if not self.priors:
            raise ValueError("plan needs at least one prior spec")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        labels = [p.label for p in self.priors]
        if len(set(labels)) != len(labels):
            raise ValueError("prior labels must be unique")


@dataclass(frozen=True)
class ParameterResult:
    """One parameter's posterior summary within one replication."""

    name: str
    param_class: str
    mean: float
    sd: float
    q2_5: float
    q50: float
    q97_5: float
    rhat: float
    ess: float
    ci_width: float
    true_value: float
    covered: object  # bool, or None for empty-category thresholds


@dataclass(frozen=True)
class ReplicationRecord:
    condition: str
    prior: str
    replication: int
    sampler_seed: int
    completed: bool
    error: str
    divergences: int
    runtime_s: float
    parameters: tuple


@dataclass(frozen=True)
class ClassAggregate:
    coverage_pct: float  # nan when the class has no coverage bookkeeping
    avg_ci_width: float
    avg_rhat: float
    pct_rhat_below_1_1: float
    avg_ess: float
    n_parameters: int


@dataclass(frozen=True)
class CellResult:
    """Aggregates for one (condition, prior) cell."""

    condition: str
    prior: str
    reference_indicator: str
    n_replications: int
    n_completed: int
    classes: dict
    records: tuple


def add_derived_structure(draws, model):
    """Append variance-scale views of the factor covariance to the draws.

    phi_var[k] is the factor variance, phi_cov[i,j] the factor covariance,
    and theta_var[...] the residual variances when those are free; all are
    deterministic functions of the sampled standard deviations and
    correlations, appended so summaries report the scale the studies use.
    """
    K = model.n_factors
    C, T = draws.n_chains, draws.n_iterations
    names = []
    cols = []
    sds = [draws.column(f"factor_sd[{k + 1}]") for k in range(K)]
    for k in range(K):
        names.append(f"phi_var[{k + 1}]")
        cols.append(sds[k] ** 2)
    for i in range(1, K):
        for j in range(i):
            r = draws.column(f"factor_corr[{i + 1},{j + 1}]")
            names.append(f"phi_cov[{i + 1},{j + 1}]")
            cols.append(r * sds[i] * sds[j])
    if model.identification.residual == "free":
        for it in model.items:
            names.append(f"theta_var[{it.item_id}]")
            cols.append(draws.column(f"resid_sd[{it.item_id}]") ** 2)
    stacked = np.stack(cols, axis=2) if cols else np.empty((C, T, 0))
    return draws.augmented(tuple(names), stacked)


def fit_dataset(model, data, prior_config, sampler_config):
    """Shared fit pipeline: posterior, chains, derived columns, summaries."""
    post = Posterior(model, data, prior_config)
    draws = run_chains(post.logpdf_and_grad, post.layout, sampler_config)
    draws = add_derived_structure(draws, model)
    summaries = summarize_draws(draws)
    return draws, summaries


def parameter_class(name, empty_names):
    """Class label for aggregation, or None for raw-scale duplicates."""
    if name in empty_names:
        return "empty-category threshold"
    if name.startswith("tau["):
        return "thresholds"
    if name.startswith("lambda["):
        return "loadings"
    if name.startswith("phi_var["):
        return "factor variances"
    if name.startswith("phi_cov["):
        return "factor covariance"
    return None


def _dataset_seed(base_seed, cell_idx, rep_idx):
    return np.random.SeedSequence((base_seed, cell_idx, rep_idx, 0))


def _sampler_seed(base_seed, cell_idx, rep_idx, prior_idx):
    ss = np.random.SeedSequence((base_seed, cell_idx, rep_idx, 1 + prior_idx))
    return int(ss.generate_state(1)[0])


def _run_task(task):
    """One (condition, replication, prior) fit; returns a ReplicationRecord."""
    cond, prior_spec, rep_idx, base_seed, cell_idx, prior_idx, sampler_cfg = task
    pop = PopulationParams.from_condition(cond)
    data = generate_dataset(pop, cond.n_rows, _dataset_seed(base_seed, cell_idx, rep_idx))
    model = pop.model_spec()
    seed = _sampler_seed(base_seed, cell_idx, rep_idx, prior_idx)
    cfg = replace(sampler_cfg, seed=seed)
    truth = pop.truth_values()
    empty = frozenset(pop.empty_category_names())
    start = time.perf_counter()
    try:
        draws, summaries = fit_dataset(model, data, prior_spec.config, cfg)
    except Exception as exc:
        return ReplicationRecord(
            condition=cond.name, prior=prior_spec.label, replication=rep_idx,
            sampler_seed=seed, completed=False, error=repr(exc),
            divergences=0, runtime_s=time.perf_counter() - start, parameters=())
    rows = []
    for s in summaries:
        cls = parameter_class(s.parameter, empty)
        if cls is None:
            continue
        true = truth[s.parameter]
        covered = None if cls == "empty-category threshold" else s.covers(true)
        rows.append(ParameterResult(
            name=s.parameter, param_class=cls, mean=s.mean, sd=s.sd,
            q2_5=s.q2_5, q50=s.q50, q97_5=s.q97_5, rhat=s.rhat, ess=s.ess,
            ci_width=s.ci_width, true_value=true, covered=covered))
    return ReplicationRecord(
        condition=cond.name, prior=prior_spec.label, replication=rep_idx,
        sampler_seed=seed, completed=True, error="",
        divergences=draws.divergence_count,
        runtime_s=time.perf_counter() - start, parameters=tuple(rows))


def _aggregate_cell(cond, prior_label, records):
    completed = [r for r in records if r.completed]
    classes = {}
    for cls in PARAMETER_CLASSES:
        rows = [p for r in completed for p in r.parameters if p.param_class == cls]
        if not rows:
            continue
        flags = [p.covered for p in rows if p.covered is not None]
        coverage = 100.0 * np.mean(flags) if flags else math.nan
        rhats = np.asarray([p.rhat for p in rows])
        classes[cls] = ClassAggregate(
            coverage_pct=float(coverage),
            avg_ci_width=float(np.mean([p.ci_width for p in rows])),
            avg_rhat=float(np.mean(rhats)),
            pct_rhat_below_1_1=float(100.0 * np.mean(rhats < 1.1)),
            avg_ess=float(np.mean([p.ess for p in rows])),
            n_parameters=len(rows))
    return CellResult(
        condition=cond.name, prior=prior_label,
        reference_indicator=cond.reference_indicator,
        n_replications=len(records), n_completed=len(completed),
        classes=classes, records=tuple(records))


def run_study(plan):
    """Execute the plan and return one CellResult per (condition, prior).

    Fits are dispatched as independent (condition, replication, prior)
    tasks; a worker pool is used when the plan asks for more than one
    worker.  A failed fit is recorded on its replication and the study
    continues.
    """
    tasks = []
    for cell_idx, cond in enumerate(plan.conditions):
        for rep_idx in range(plan.replications):
            for prior_idx, spec in enumerate(plan.priors):
                tasks.append((cond, spec, rep_idx, plan.base_seed,
                              cell_idx, prior_idx, plan.sampler))
    if plan.n_workers > 1:
        with ProcessPoolExecutor(max_workers=plan.n_workers) as pool:
            records = list(pool.map(_run_task, tasks))
    else:
        records = [_run_task(t) for t in tasks]
    cells = []
    i = 0
    for cond in plan.conditions:
        per_prior = {spec.label: [] for spec in plan.priors}
        for _ in range(plan.replications):
            for spec in plan.priors:
                per_prior[spec.label].append(records[i])
                i += 1
        for spec in plan.priors:
            cells.append(_aggregate_cell(cond, spec.label, per_prior[spec.label]))
    return cells


def _fmt(x, decimals):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "*"
    return f"{x:.{decimals}f}"


def _text_table(title, header, rows):
    widths = [max(len(str(h)), *(len(str(r[j])) for r in rows)) if rows else len(str(h))
              for j, h in enumerate(header)]
    lines = [title]
    lines.append("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def aggregate(cells):
    """Aligned-text tables over a study's cell results.

    Emits a convergence table (threshold parameters), a coverage/CI-width
    table by parameter class, and, when the plan varied the reference
    indicator, a split of coverage and width by reference-indicator kind.
    """
    if not cells:
        raise ValueError("no cell results to aggregate")
    priors = []
    for c in cells:
        if c.prior not in priors:
            priors.append(c.prior)
    conditions = []
    for c in cells:
        if c.condition not in conditions:
            conditions.append(c.condition)
    by_key = {(c.condition, c.prior): c for c in cells}

    rows = []
    for cond in conditions:
        for prior in priors:
            cell = by_key.get((cond, prior))
            if cell is None:
                continue
            for cls in ("thresholds", "empty-category threshold"):
                agg = cell.classes.get(cls)
                if agg is None:
                    continue
                rows.append((cond, cls, prior, _fmt(agg.avg_rhat, 2),
                             _fmt(agg.pct_rhat_below_1_1, 1), _fmt(agg.avg_ess, 1),
                             f"{cell.n_completed}/{cell.n_replications}"))
    out = _text_table(
        "Threshold convergence by condition and prior",
        ("condition", "class", "prior", "avg_rhat", "pct_rhat_lt_1.1", "avg_ess", "completed"),
        rows)

    rows = []
    for cls in PARAMETER_CLASSES:
        for cond in conditions:
            cov = []
            wid = []
            seen = False
            for prior in priors:
                cell = by_key.get((cond, prior))
                agg = cell.classes.get(cls) if cell else None
                if agg is None:
                    cov.append("*")
                    wid.append("*")
                else:
                    seen = True
                    cov.append(_fmt(agg.coverage_pct, 1))
                    wid.append(_fmt(agg.avg_ci_width, 2))
            if seen:
                rows.append((cls, cond, *cov, *wid))
    header = ("parameter", "condition",
              *(f"coverage_{p}" for p in priors), *(f"width_{p}" for p in priors))
    out += "\n" + _text_table("Coverage and CI width by parameter class", header, rows)

    ref_kinds = {c.reference_indicator for c in cells}
    if len(ref_kinds) > 1:
        rows = []
        for cls in PARAMETER_CLASSES:
            for kind in sorted(ref_kinds):
                cov = []
                wid = []
                seen = False
                for prior in priors:
                    sub = [c.classes[cls] for c in cells
                           if c.reference_indicator == kind and c.prior == prior
                           and cls in c.classes]
                    if not sub:
                        cov.append("*")
                        wid.append("*")
                        continue
                    seen = True
                    covs = [a.coverage_pct for a in sub if not math.isnan(a.coverage_pct)]
                    cov.append(_fmt(float(np.mean(covs)) if covs else math.nan, 1))
                    wid.append(_fmt(float(np.mean([a.avg_ci_width for a in sub])), 2))
                if seen:
                    rows.append((cls, kind, *cov, *wid))
        header = ("parameter", "reference_indicator",
                  *(f"coverage_{p}" for p in priors), *(f"width_{p}" for p in priors))
        out += "\n" + _text_table("Coverage and CI width by reference indicator", header, rows)
    return out


def write_study_outputs(cells, out_dir, header_line=None):
    """Write per-replication records, per-cell aggregates, and text tables.

    Returns the three file paths.  header_line, when given, is written as a
    comment line at the top of every file.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    rec_path = os.path.join(out_dir, "replications.csv")
    cell_path = os.path.join(out_dir, "cells.csv")
    table_path = os.path.join(out_dir, "tables.txt")

    with open(rec_path, "w", newline="", encoding="utf-8") as fh:
        if header_line:
            fh.write(f"# {header_line}\n")
        w = csv.writer(fh)
        w.writerow(["condition", "prior", "replication", "completed", "error",
                    "divergences", "runtime_s", "parameter", "class", "mean",
                    "sd", "q2.5", "q50", "q97.5", "rhat", "ess", "ci_width",
                    "true_value", "covered"])
        for c in cells:
            for r in c.records:
                if not r.completed:
                    w.writerow([r.condition, r.prior, r.replication, 0, r.error,
                                r.divergences, f"{r.runtime_s:.3f}",
                                "", "", "", "", "", "", "", "", "", "", "", ""])
                    continue
                for p in r.parameters:
                    w.writerow([r.condition, r.prior, r.replication, 1, "",
                                r.divergences, f"{r.runtime_s:.3f}", p.name,
                                p.param_class, p.mean, p.sd, p.q2_5, p.q50,
                                p.q97_5, p.rhat, p.ess, p.ci_width, p.true_value,
                                "" if p.covered is None else int(p.covered)])

    with open(cell_path, "w", newline="", encoding="utf-8") as fh:
        if header_line:
            fh.write(f"# {header_line}\n")
        w = csv.writer(fh)
        w.writerow(["condition", "prior", "reference_indicator", "class",
                    "n_replications", "n_completed", "coverage_pct",
                    "avg_ci_width", "avg_rhat", "pct_rhat_lt_1.1", "avg_ess",
                    "n_parameters"])
        for c in cells:
            for cls, agg in c.classes.items():
                w.writerow([c.condition, c.prior, c.reference_indicator, cls,
                            c.n_replications, c.n_completed,
                            "" if math.isnan(agg.coverage_pct) else f"{agg.coverage_pct:.1f}",
                            f"{agg.avg_ci_width:.2f}", f"{agg.avg_rhat:.3f}",
                            f"{agg.pct_rhat_below_1_1:.1f}", f"{agg.avg_ess:.1f}",
                            agg.n_parameters])

    with open(table_path, "w", encoding="utf-8") as fh:
        if header_line:
            fh.write(f"# {header_line}\n")
        fh.write(aggregate(cells))
    return rec_path, cell_path, table_path
