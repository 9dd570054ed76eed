"""Command-line surface: config parsing, data ingestion, result persistence.

Subcommands
-----------
simulate       generate a dataset from a simulation-condition file
fit            estimate a model described by a run-config file
mc-study       run a Monte Carlo study plan
prior-predict  sample realized threshold priors to a draw CSV
prior-solve    solve for the sequential prior matching target moments

Config files are YAML (safe subset: scalars, lists, maps).  Category
counts are always declared, never inferred from the data; the whole point
of the threshold machinery is estimating cutpoints for categories the
sample never shows, and inference from data would silently drop them.

Every output file carries a provenance header: package version, seed, and
a hash of the canonical JSON form of the parsed configuration.  CSV and
text outputs carry it as a leading ``#`` comment line (readers here skip
such lines); JSON sidecars carry it as a ``provenance`` key.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np
import yaml

from . import __version__
from .harness import (PriorSpec, StudyPlan, default_prior_specs, fit_dataset,
                      run_study, write_study_outputs)
from .model_core import DatasetMatrix, IdentificationRule, ItemSpec, ModelSpec
from .priors import (PriorConfig, StructuralPriors, sample_induced_thresholds,
                     sample_sequential_thresholds, solve_informative_sequential)
from .sampler import SamplerConfig
from .simgen import PopulationParams, SimCondition, generate_dataset


class ConfigError(ValueError):
    """A configuration or input-data problem; maps to exit code 1."""


GROUP_COLUMN = "group"


# ---------------------------------------------------------------------------
# provenance

def config_hash(config_dict):
    """Short digest of a config's canonical JSON form."""
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def provenance_line(seed, digest):
    return f"ordifa {__version__} | seed={seed} | config={digest}"


# ---------------------------------------------------------------------------
# config files

def _load_yaml(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path!r}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed {what} file {path!r}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} file {path!r} must be a mapping at top level")
    return doc


def _require(doc, key, what):
    if key not in doc:
        raise ConfigError(f"{what} is missing required key {key!r}")
    return doc[key]


def _check_keys(doc, allowed, what):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{what} has unknown keys: {', '.join(unknown)}")


def _dataclass_from_mapping(cls, doc, what):
    """Build a dataclass from a mapping using its own field names."""
    names = {f.name for f in fields(cls)}
    _check_keys(doc, names, what)
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def parse_sampler_section(doc):
    return _dataclass_from_mapping(SamplerConfig, doc or {}, "sampler section")


def parse_prior_section(doc):
    """PriorConfig from a mapping with a ``family`` tag."""
    doc = dict(doc or {})
    family = doc.pop("family", "sequential")
    structural = doc.pop("structural", None)
    if structural is not None:
        structural = _dataclass_from_mapping(
            StructuralPriors, structural, "structural prior section")
    try:
        if family == "sequential":
            _check_keys(doc, ("mu", "dispersion", "is_variance"), "sequential prior")
            return PriorConfig.sequential(
                mu=doc.get("mu", 0.0), dispersion=doc.get("dispersion", 1.5),
                is_variance=bool(doc.get("is_variance", False)),
                structural=structural)
        if family == "induced":
            _check_keys(doc, ("alpha", "anchor", "cdf_variant"), "induced prior")
            return PriorConfig.induced(
                alpha=doc.get("alpha", 1.0), anchor=float(doc.get("anchor", 0.0)),
                cdf_variant=doc.get("cdf_variant", "exact-normal"),
                structural=structural)
    except ValueError as exc:
        raise ConfigError(f"invalid prior section: {exc}") from exc
    raise ConfigError(f"unknown prior family {family!r}; "
                      "expected 'sequential' or 'induced'")


def prior_section_dict(config):
    """Inverse of :func:`parse_prior_section`, for round-tripping."""
    sp = config.structural
    out = {"family": config.threshold_family,
           "structural": {"loading_loc": sp.loading_loc,
                          "loading_scale": sp.loading_scale,
                          "factor_corr_shape": sp.factor_corr_shape,
                          "variance_scale": sp.variance_scale}}
    def plain(v):
        return v.tolist() if isinstance(v, np.ndarray) else v
    if config.threshold_family == "sequential":
        out.update(mu=plain(config.seq_mu), dispersion=plain(config.seq_dispersion),
                   is_variance=config.seq_is_variance)
    else:
        out.update(alpha=plain(config.alpha), anchor=config.anchor,
                   cdf_variant=config.cdf_variant)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Everything one ``fit`` invocation needs."""

    model: ModelSpec
    prior: PriorConfig
    sampler: SamplerConfig
    data_path: str
    output_dir: str
    seed: int = 0

    def item_ids(self):
        return [it.item_id for it in self.model.items]

    def to_dict(self):
        """Canonical plain-data form; parsing this back gives equal configs."""
        ident = self.model.identification
        model = {
            "factors": self.model.n_factors,
            "items": [{"id": it.item_id,
                       "factors": [k + 1 for k in it.factor_indices],
                       "categories": it.n_categories,
                       "reference": it.is_reference}
                      for it in self.model.items],
            "identification": {"residual": ident.residual,
                               "residual_value": ident.residual_value,
                               "reference_loading": ident.reference_loading},
        }
        sampler = {f.name: getattr(self.sampler, f.name)
                   for f in fields(SamplerConfig)}
        return {"model": model, "prior": prior_section_dict(self.prior),
                "sampler": sampler, "data": self.data_path,
                "output_dir": self.output_dir, "seed": self.seed}

    def serialize(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def parse_run_config(doc):
    """RunConfig from a parsed mapping; raises ConfigError on any problem."""
    _check_keys(doc, ("model", "prior", "sampler", "data", "output_dir", "seed"),
                "run config")
    model_doc = _require(doc, "model", "run config")
    _check_keys(model_doc, ("factors", "items", "identification"), "model section")
    n_factors = int(_require(model_doc, "factors", "model section"))
    items_doc = _require(model_doc, "items", "model section")
    if not isinstance(items_doc, list) or not items_doc:
        raise ConfigError("model section needs a non-empty item list")
    items = []
    for j, it in enumerate(items_doc):
        what = f"item entry {j + 1}"
        _check_keys(it, ("id", "factors", "categories", "reference"), what)
        ks = _require(it, "factors", what)
        ks = ks if isinstance(ks, list) else [ks]
        try:
            items.append(ItemSpec(
                item_id=_require(it, "id", what),
                factor_indices=tuple(int(k) - 1 for k in ks),
                n_categories=int(_require(it, "categories", what)),
                is_reference=bool(it.get("reference", False))))
        except ValueError as exc:
            raise ConfigError(f"invalid {what}: {exc}") from exc
    ident = _dataclass_from_mapping(
        IdentificationRule, model_doc.get("identification") or {},
        "identification section")
    try:
        model = ModelSpec(n_factors=n_factors, items=tuple(items),
                          identification=ident)
    except ValueError as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc
    prior = parse_prior_section(doc.get("prior"))
    for it in model.items:
        try:
            prior.threshold_prior_for(it.n_categories)
        except ValueError as exc:
            raise ConfigError(
                f"prior section cannot serve item {it.item_id!r}: {exc}") from exc
    return RunConfig(
        model=model,
        prior=prior,
        sampler=parse_sampler_section(doc.get("sampler")),
        data_path=str(_require(doc, "data", "run config")),
        output_dir=str(doc.get("output_dir", "fit_out")),
        seed=int(doc.get("seed", 0)))


def load_run_config(path):
    return parse_run_config(_load_yaml(path, "run config"))


def parse_condition(doc):
    return _dataclass_from_mapping(SimCondition, doc, "condition file")


def parse_study_plan(doc):
    """StudyPlan plus output directory from a parsed plan mapping."""
    _check_keys(doc, ("conditions", "priors", "replications", "base_seed",
                      "workers", "sampler", "out_dir"), "study plan")
    cond_docs = _require(doc, "conditions", "study plan")
    if not isinstance(cond_docs, list) or not cond_docs:
        raise ConfigError("study plan needs a non-empty condition list")
    conditions = tuple(parse_condition(c) for c in cond_docs)
    prior_docs = doc.get("priors")
    if prior_docs is None:
        priors = default_prior_specs()
    else:
        priors = []
        for p in prior_docs:
            p = dict(p)
            label = p.pop("label", None)
            if not label:
                raise ConfigError("every plan prior needs a label")
            priors.append(PriorSpec(label=str(label), config=parse_prior_section(p)))
        priors = tuple(priors)
    sampler = doc.get("sampler")
    kwargs = {}
    if sampler is not None:
        kwargs["sampler"] = parse_sampler_section(sampler)
    try:
        plan = StudyPlan(conditions=conditions, priors=priors,
                         replications=int(doc.get("replications", 1)),
                         base_seed=int(doc.get("base_seed", 0)),
                         n_workers=int(doc.get("workers", 1)), **kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid study plan: {exc}") from exc
    for spec in plan.priors:
        for cond in plan.conditions:
            try:
                spec.config.threshold_prior_for(cond.n_categories)
            except ValueError as exc:
                raise ConfigError(f"plan prior {spec.label!r} cannot serve "
                                  f"condition {cond.name!r}: {exc}") from exc
    return plan, str(doc.get("out_dir", "study_out"))


# ---------------------------------------------------------------------------
# dataset ingestion

def _read_table(path):
    """(header, string rows) from a CSV, skipping ``#`` comment lines."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh)
                    if r and not r[0].lstrip().startswith("#")]
    except OSError as exc:
        raise ConfigError(f"cannot read data file {path!r}: {exc}") from exc
    if not rows:
        raise ConfigError(f"data file {path!r} is empty")
    header, body = rows[0], rows[1:]
    if not body:
        raise ConfigError(f"data file {path!r} has a header but no rows")
    width = len(header)
    for r, row in enumerate(body):
        if len(row) != width:
            raise ConfigError(f"row {r + 1} has {len(row)} fields, "
                              f"header has {width}")
    return header, body


def _int_matrix(body, header, columns):
    """Integer matrix for the named columns; errors cite row and column."""
    idx = [header.index(c) for c in columns]
    out = np.empty((len(body), len(columns)), dtype=np.int64)
    for r, row in enumerate(body):
        for j, c in enumerate(idx):
            cell = row[c].strip()
            try:
                out[r, j] = int(cell)
            except ValueError:
                raise ConfigError(
                    f"row {r + 1}, column {header[c]!r}: "
                    f"expected an integer code, got {cell!r}") from None
    return out


def _warn_degenerate(matrix, columns):
    for j, name in enumerate(columns):
        if np.all(matrix[:, j] == matrix[0, j]):
            warnings.warn(f"item {name!r} is degenerate: every response is "
                          f"{matrix[0, j]}; its thresholds will be prior-dominated",
                          stacklevel=3)


def read_grouped_dataset(path, item_ids, n_categories):
    """Ordered ``{group label: DatasetMatrix}`` from a response CSV.

    The file needs one column per item id; a ``group`` column, when
    present, splits rows into independently fitted groups.  Without one,
    the single group is labeled "all".
    """
    header, body = _read_table(path)
    missing = [c for c in item_ids if c not in header]
    if missing:
        raise ConfigError(f"data file {path!r} lacks declared item columns: "
                          f"{', '.join(missing)}")
    matrix = _int_matrix(body, header, item_ids)
    _warn_degenerate(matrix, item_ids)
    if GROUP_COLUMN in header:
        g = header.index(GROUP_COLUMN)
        labels = [row[g].strip() for row in body]
        order = list(dict.fromkeys(labels))
        masks = {lab: np.asarray([x == lab for x in labels]) for lab in order}
    else:
        order = ["all"]
        masks = {"all": np.ones(len(body), dtype=bool)}
    out = {}
    for lab in order:
        rows = matrix[masks[lab]]
        if rows.shape[0] == 0:
            raise ConfigError(f"group {lab!r} has no rows")
        try:
            out[lab] = DatasetMatrix.build(rows, n_categories)
        except ValueError as exc:
            raise ConfigError(f"group {lab!r}: {exc}") from exc
    return out


def read_dataset(path, n_categories, item_ids=None):
    """Single-group DatasetMatrix from a CSV of integer codes.

    Validates codes against the declared category counts (errors cite row,
    column, and value), warns on degenerate constant items, and records
    per-item category counts, zeros included, on the returned matrix.
    """
    if item_ids is None:
        header, _ = _read_table(path)
        item_ids = [c for c in header if c != GROUP_COLUMN]
    groups = read_grouped_dataset(path, item_ids, n_categories)
    if len(groups) != 1:
        raise ConfigError(f"data file {path!r} has {len(groups)} groups; "
                          "this reader expects exactly one")
    return next(iter(groups.values()))


def category_count_table(item_ids, data):
    """Aligned text of observed counts per category, zeros flagged."""
    ml = max(len(i) for i in item_ids)
    lines = ["observed category counts (0 marks an empty category):"]
    for name, counts in zip(item_ids, data.counts):
        cells = " ".join(f"{int(c):>5d}" for c in counts)
        lines.append(f"  {name:<{ml}}  {cells}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# result persistence

def write_draws_csv(path, draws, header_line):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header_line}\n")
        w = csv.writer(fh)
        w.writerow(["chain", "iteration", "divergent", *draws.param_names])
        for c in range(draws.n_chains):
            for t in range(draws.n_iterations):
                w.writerow([c + 1, t + 1, int(draws.divergent[c, t]),
                            *(repr(float(v)) for v in draws.draws[c, t])])


def write_summary_csv(path, summaries, header_line):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header_line}\n")
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "sd", "q2.5", "q50", "q97.5",
                    "rhat", "ess", "ci_width"])
        for s in summaries:
            w.writerow([s.parameter, s.mean, s.sd, s.q2_5, s.q50, s.q97_5,
                        s.rhat, s.ess, s.ci_width])


def write_dataset_csv(path, item_ids, data, header_line):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header_line}\n")
        w = csv.writer(fh)
        w.writerow(item_ids)
        for row in data.responses:
            w.writerow([int(v) for v in row])


# ---------------------------------------------------------------------------
# subcommands

def _safe_label(label):
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label)


def _cmd_simulate(args):
    import os

    doc = _load_yaml(args.condition, "condition")
    cond = parse_condition(doc)
    digest = config_hash(doc)
    header = provenance_line(cond.seed, digest)
    pop = PopulationParams.from_condition(cond)
    data = generate_dataset(pop, cond.n_rows, np.random.SeedSequence(cond.seed))
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "dataset.csv")
    truth_path = os.path.join(args.out, "truth.json")
    write_dataset_csv(data_path, pop.item_ids(), data, header)
    sidecar = {"provenance": {"version": __version__, "seed": cond.seed,
                              "config": digest},
               "condition": doc,
               "population": pop.to_dict(),
               "truth": pop.truth_values(),
               "empty_category_names": pop.empty_category_names()}
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {data_path} and {truth_path}")
    print(category_count_table(pop.item_ids(), data))
    return 0


def _cmd_fit(args):
    import os

    cfg = load_run_config(args.config)
    digest = config_hash(cfg.to_dict())
    groups = read_grouped_dataset(cfg.data_path, cfg.item_ids(),
                                  cfg.model.n_categories)
    os.makedirs(cfg.output_dir, exist_ok=True)
    written = []
    for g_idx, (label, data) in enumerate(groups.items()):
        print(f"group {label!r}: {data.n_rows} rows, {data.n_items} items")
        print(category_count_table(cfg.item_ids(), data))
        seed = cfg.seed if len(groups) == 1 else int(
            np.random.SeedSequence((cfg.seed, g_idx)).generate_state(1)[0])
        sampler_cfg = replace(cfg.sampler, seed=seed)
        header = provenance_line(seed, digest)
        try:
            draws, summaries = fit_dataset(cfg.model, data, cfg.prior, sampler_cfg)
        except Exception as exc:
            print(f"sampler aborted on group {label!r}: {exc}", file=sys.stderr)
            return 2
        suffix = "" if len(groups) == 1 else "_" + _safe_label(label)
        dpath = os.path.join(cfg.output_dir, f"draws{suffix}.csv")
        spath = os.path.join(cfg.output_dir, f"summary{suffix}.csv")
        write_draws_csv(dpath, draws, header)
        write_summary_csv(spath, summaries, header)
        written += [dpath, spath]
        print(f"group {label!r}: {draws.divergence_count} divergent transitions, "
              f"wrote {dpath} and {spath}")
    print(f"fit complete: {len(written)} files in {cfg.output_dir}")
    return 0


def _cmd_mc_study(args):
    doc = _load_yaml(args.plan, "study plan")
    plan, out_dir = parse_study_plan(doc)
    digest = config_hash(doc)
    header = provenance_line(plan.base_seed, digest)
    cells = run_study(plan)
    paths = write_study_outputs(cells, out_dir, header_line=header)
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_prior_predict(args):
    doc = _load_yaml(args.prior, "prior")
    digest = config_hash(doc)
    n_categories = int(_require(doc, "categories", "prior file"))
    if n_categories < 2:
        raise ConfigError("prior file needs categories >= 2")
    spec = dict(doc)
    seed = int(spec.pop("seed", 0))
    spec.pop("categories")
    config = parse_prior_section(spec)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    try:
        prior = config.threshold_prior_for(n_categories)
    except ValueError as exc:
        raise ConfigError(f"prior file cannot produce thresholds for "
                          f"{n_categories} categories: {exc}") from exc
    if config.threshold_family == "sequential":
        taus = sample_sequential_thresholds(prior, rng, size=args.draws)
    else:
        taus = np.stack([sample_induced_thresholds(prior.alpha, prior.anchor, rng)
                         for _ in range(args.draws)])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {provenance_line(seed, digest)}\n")
        w = csv.writer(fh)
        w.writerow(["draw", *(f"tau_{c + 1}" for c in range(n_categories - 1))])
        for d, row in enumerate(taus):
            w.writerow([d + 1, *(repr(float(v)) for v in row)])
    print(f"wrote {args.draws} realized threshold draws to {args.out}")
    return 0


def _cmd_prior_solve(args):
    doc = _load_yaml(args.targets, "targets")
    _check_keys(doc, ("E", "Var"), "targets file")
    E = _require(doc, "E", "targets file")
    V = _require(doc, "Var", "targets file")
    try:
        prior = solve_informative_sequential(E, V)
    except ValueError as exc:
        raise ConfigError(f"targets are infeasible: {exc}") from exc
    var = prior.sd_star ** 2
    print("component  E[tau*]     Var[tau*]   prior")
    for c in range(len(prior)):
        print(f"{c + 1:>9d}  {prior.mu_star[c]:>10.4f}  {var[c]:>10.4f}  "
              f"Normal({prior.mu_star[c]:.2f}, {var[c]:.2f})")
    return 0


# ---------------------------------------------------------------------------
# entry points

class _Usage(Exception):
    def __init__(self, parser, message):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as exceptions, not sys.exit(2)."""

    def error(self, message):
        raise _Usage(self, message)


def build_parser():
    parser = _Parser(prog="ordifa",
                     description="Bayesian ordinal item factor analysis")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", parents=[], add_help=True,
                       help="generate a dataset from a condition file")
    p.add_argument("--condition", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit the model in a run-config file")
    p.add_argument("--config", required=True, metavar="FILE")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("mc-study", help="run a Monte Carlo study plan")
    p.add_argument("--plan", required=True, metavar="FILE")
    p.set_defaults(func=_cmd_mc_study)

    p = sub.add_parser("prior-predict",
                       help="sample realized threshold priors to CSV")
    p.add_argument("--prior", required=True, metavar="FILE")
    p.add_argument("--draws", type=int, default=10000, metavar="N")
    p.add_argument("--out", default="prior_draws.csv", metavar="FILE")
    p.set_defaults(func=_cmd_prior_predict)

    p = sub.add_parser("prior-solve",
                       help="solve the sequential prior for target moments")
    p.add_argument("--targets", required=True, metavar="FILE")
    p.set_defaults(func=_cmd_prior_solve)
    return parser


def cli_main(argv=None):
    """Run one CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    raise SystemExit(cli_main(sys.argv[1:]))
