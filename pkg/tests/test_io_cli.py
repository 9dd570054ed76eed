"""Config parsing, dataset IO, and the command-line surface."""

import csv
import json

import numpy as np
import pytest
import yaml

import ordifa.io_cli as io_cli
from ordifa import __version__
from ordifa.io_cli import (ConfigError, cli_main, config_hash,
                           parse_prior_section, parse_run_config,
                           parse_sampler_section, parse_study_plan,
                           provenance_line, read_dataset,
                           read_grouped_dataset, write_draws_csv,
                           write_summary_csv)
from ordifa.sampler import SamplerConfig


def run_config_doc(data_path="data.csv", categories=3):
    return {
        "model": {
            "factors": 1,
            "items": [
                {"id": "item_1", "factors": 1, "categories": categories,
                 "reference": True},
                {"id": "item_2", "factors": [1], "categories": categories,
                 "reference": False},
                {"id": "item_3", "factors": 1, "categories": categories,
                 "reference": False},
            ],
            "identification": {"residual": "fixed", "residual_value": 1.0},
        },
        "prior": {"family": "sequential", "mu": 0.0, "dispersion": 1.5},
        "sampler": {"n_chains": 2, "n_warmup": 60, "n_sampling": 60,
                    "init": "zero", "seed": 4},
        "data": data_path,
        "output_dir": "outdir",
        "seed": 9,
    }


def write_response_csv(path, matrix, item_ids, groups=None, comment=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        header = list(item_ids) + (["group"] if groups is not None else [])
        w.writerow(header)
        for r, row in enumerate(matrix):
            out = [int(v) for v in row]
            if groups is not None:
                out.append(groups[r])
            w.writerow(out)


# --- hashing and provenance --------------------------------------------------

def test_config_hash_is_canonical():
    a = config_hash({"b": 2, "a": [1, 2]})
    b = config_hash({"a": [1, 2], "b": 2})
    assert a == b
    assert len(a) == 16 and int(a, 16) >= 0
    assert config_hash({"a": [1, 2], "b": 3}) != a


def test_provenance_line_contents():
    line = provenance_line(7, "abcd" * 4)
    assert __version__ in line
    assert "seed=7" in line and "config=" + "abcd" * 4 in line


# --- config parsing ----------------------------------------------------------

def test_run_config_round_trip():
    cfg = parse_run_config(run_config_doc())
    again = parse_run_config(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert config_hash(again.to_dict()) == config_hash(cfg.to_dict())
    assert cfg.item_ids() == ["item_1", "item_2", "item_3"]
    assert cfg.sampler.n_warmup == 60 and cfg.seed == 9
    assert cfg.model.items[0].factor_indices == (0,)
    parsed_again = parse_run_config(yaml.safe_load(cfg.serialize()))
    assert parsed_again.to_dict() == cfg.to_dict()


def test_run_config_rejects_unknown_and_missing_keys():
    doc = run_config_doc()
    doc["extra"] = 1
    with pytest.raises(ConfigError, match="unknown"):
        parse_run_config(doc)
    doc = run_config_doc()
    del doc["model"]["factors"]
    with pytest.raises(ConfigError, match="factors"):
        parse_run_config(doc)
    doc = run_config_doc()
    doc["model"]["items"][1]["categories"] = 1
    with pytest.raises(ConfigError, match="item"):
        parse_run_config(doc)
    doc = run_config_doc()
    doc["model"]["items"][1]["reference"] = True
    with pytest.raises(ConfigError, match="reference"):
        parse_run_config(doc)


def test_prior_section_validation():
    with pytest.raises(ConfigError, match="family"):
        parse_prior_section({"family": "cauchy"})
    with pytest.raises(ConfigError, match="unknown"):
        parse_prior_section({"family": "sequential", "alpha": 2.0})
    cfg = parse_prior_section({"family": "induced", "alpha": [1, 2, 3, 4]})
    assert cfg.threshold_family == "induced"
    np.testing.assert_array_equal(cfg.alpha, [1, 2, 3, 4])


def test_plan_priors_validated_against_conditions():
    doc = {"conditions": [{"shape": "symmetric", "n_categories": 3,
                           "n_rows": 40, "n_factors": 1,
                           "items_per_factor": 3}],
           "priors": [{"label": "bad", "family": "sequential",
                       "dispersion": -1.0}],
           "replications": 1}
    with pytest.raises(ConfigError, match="plan prior 'bad'"):
        parse_study_plan(doc)
    doc["priors"] = [{"label": "narrow", "family": "induced",
                      "alpha": [1.0, 1.0, 1.0, 1.0]}]
    with pytest.raises(ConfigError, match="cannot serve condition"):
        parse_study_plan(doc)


def test_prior_that_cannot_serve_an_item_is_a_config_error():
    doc = run_config_doc(categories=3)
    doc["prior"] = {"family": "induced", "alpha": [1.0, 1.0, 1.0, 1.0]}
    with pytest.raises(ConfigError, match="cannot serve item"):
        parse_run_config(doc)


def test_sampler_section_field_names():
    cfg = parse_sampler_section({"n_chains": 3, "max_treedepth": 7})
    assert cfg.n_chains == 3 and cfg.max_treedepth == 7
    assert cfg.n_warmup == SamplerConfig().n_warmup
    with pytest.raises(ConfigError, match="unknown"):
        parse_sampler_section({"chains": 3})


def test_study_plan_parsing_defaults():
    doc = {"conditions": [{"shape": "symmetric", "n_categories": 3,
                           "n_rows": 40, "n_factors": 1,
                           "items_per_factor": 3}],
           "replications": 2, "out_dir": "study"}
    plan, out_dir = parse_study_plan(doc)
    assert out_dir == "study"
    assert [p.label for p in plan.priors] == ["Joint", "Small Variance",
                                              "Large Variance"]
    assert plan.replications == 2 and plan.sampler.init == "zero"
    doc["priors"] = [{"label": "S", "family": "sequential", "dispersion": 2.0}]
    doc["sampler"] = {"n_chains": 2, "n_warmup": 50, "n_sampling": 50}
    plan2, _ = parse_study_plan(doc)
    assert [p.label for p in plan2.priors] == ["S"]
    assert plan2.sampler.n_warmup == 50
    with pytest.raises(ConfigError, match="label"):
        parse_study_plan({"conditions": doc["conditions"],
                          "priors": [{"family": "sequential"}]})


# --- dataset ingestion -------------------------------------------------------

def test_read_dataset_counts_and_comment_skipping(tmp_path):
    path = tmp_path / "d.csv"
    write_response_csv(path, [[1, 3], [2, 3], [2, 3]], ["item_1", "item_2"],
                       comment="provenance")
    data = read_dataset(path, [3, 3])
    assert data.n_rows == 3
    np.testing.assert_array_equal(data.counts[0], [1, 2, 0])
    np.testing.assert_array_equal(data.counts[1], [0, 0, 3])


def test_read_dataset_error_citations(tmp_path):
    path = tmp_path / "d.csv"
    write_response_csv(path, [[1, 2], [1, 9]], ["item_1", "item_2"])
    with pytest.raises(ConfigError, match="row 2, column 2"):
        read_dataset(path, [3, 3])
    path2 = tmp_path / "e.csv"
    with open(path2, "w", encoding="utf-8") as fh:
        fh.write("item_1,item_2\n1,x\n")
    with pytest.raises(ConfigError, match="expected an integer code, got 'x'"):
        read_dataset(path2, [3, 3])
    path3 = tmp_path / "f.csv"
    with open(path3, "w", encoding="utf-8") as fh:
        fh.write("item_1,item_2\n1,2,3\n")
    with pytest.raises(ConfigError, match="fields"):
        read_dataset(path3, [3, 3])
    with pytest.raises(ConfigError, match="cannot read"):
        read_dataset(tmp_path / "absent.csv", [3, 3])
    path4 = tmp_path / "g.csv"
    path4.write_text("item_1,item_2\n")
    with pytest.raises(ConfigError, match="no rows"):
        read_dataset(path4, [3, 3])


def test_read_dataset_missing_item_column(tmp_path):
    path = tmp_path / "d.csv"
    write_response_csv(path, [[1], [2]], ["item_1"])
    with pytest.raises(ConfigError, match="item_2"):
        read_grouped_dataset(path, ["item_1", "item_2"], [3, 3])


def test_degenerate_item_warns(tmp_path):
    path = tmp_path / "d.csv"
    write_response_csv(path, [[2, 1], [2, 2], [2, 1]], ["item_1", "item_2"])
    with pytest.warns(UserWarning, match="item_1"):
        read_dataset(path, [3, 3])


def test_grouped_dataset_order_and_errors(tmp_path):
    path = tmp_path / "d.csv"
    write_response_csv(path, [[1, 2], [2, 2], [3, 1], [1, 1]],
                       ["item_1", "item_2"], groups=["b", "a", "b", "a"])
    groups = read_grouped_dataset(path, ["item_1", "item_2"], [3, 2])
    assert list(groups) == ["b", "a"]  # first-appearance order
    assert groups["b"].n_rows == 2 and groups["a"].n_rows == 2
    np.testing.assert_array_equal(groups["b"].responses, [[1, 2], [3, 1]])
    with pytest.raises(ConfigError, match="2 groups"):
        read_dataset(path, [3, 2])
    bad = tmp_path / "bad.csv"
    write_response_csv(bad, [[1, 2], [9, 2]], ["item_1", "item_2"],
                       groups=["a", "b"])
    with pytest.raises(ConfigError, match="group 'b'"):
        read_grouped_dataset(bad, ["item_1", "item_2"], [3, 2])


# --- result files ------------------------------------------------------------

def test_draws_and_summary_files_round_trip(tmp_path):
    from ordifa.diagnostics import summarize_draws
    from ordifa.sampler import PosteriorDraws

    rng = np.random.default_rng(0)
    draws = PosteriorDraws(
        param_names=("a", "b"), draws=rng.standard_normal((2, 5, 2)),
        divergent=np.zeros((2, 5), dtype=bool), step_size=np.ones(2),
        accept_rate=np.ones(2), warmup_divergences=np.zeros(2, dtype=np.int64),
        seed=0, n_warmup=10)
    dpath = tmp_path / "draws.csv"
    write_draws_csv(dpath, draws, "hdr")
    with open(dpath, encoding="utf-8") as fh:
        assert fh.readline() == "# hdr\n"
        rows = list(csv.reader(fh))
    assert rows[0] == ["chain", "iteration", "divergent", "a", "b"]
    assert len(rows) == 1 + 10
    # full-precision repr survives the round trip bit for bit
    assert float(rows[1][3]) == draws.draws[0, 0, 0]
    spath = tmp_path / "summary.csv"
    write_summary_csv(spath, summarize_draws(draws), "hdr")
    with open(spath, encoding="utf-8") as fh:
        assert fh.readline() == "# hdr\n"
        srows = list(csv.reader(fh))
    assert srows[0] == ["parameter", "mean", "sd", "q2.5", "q50", "q97.5",
                        "rhat", "ess", "ci_width"]
    assert [r[0] for r in srows[1:]] == ["a", "b"]


# --- the command line, end to end --------------------------------------------

def test_cli_usage_errors(capsys, tmp_path):
    assert cli_main([]) == 1
    assert cli_main(["fit"]) == 1
    assert cli_main(["unknown-cmd"]) == 1
    assert cli_main(["fit", "--config", str(tmp_path / "absent.yaml")]) == 1
    err = capsys.readouterr().err
    assert "usage" in err and "error" in err
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed\n")
    assert cli_main(["fit", "--config", str(bad)]) == 1


def test_cli_simulate_is_deterministic(tmp_path, capsys):
    cpath = tmp_path / "cond.yaml"
    cpath.write_text(yaml.safe_dump({
        "shape": "sparse", "n_categories": 4, "n_rows": 50,
        "n_sparse_items": 2, "seed": 21}))
    out1 = tmp_path / "o1"
    out2 = tmp_path / "o2"
    assert cli_main(["simulate", "--condition", str(cpath), "--out", str(out1)]) == 0
    assert cli_main(["simulate", "--condition", str(cpath), "--out", str(out2)]) == 0
    d1 = (out1 / "dataset.csv").read_text()
    assert d1 == (out2 / "dataset.csv").read_text()
    assert d1.startswith("# ordifa")
    sidecar = json.loads((out1 / "truth.json").read_text())
    assert sidecar["provenance"]["seed"] == 21
    assert sidecar["truth"]["tau[item_6,1]"] == -15.0
    assert "tau[item_6,1]" in sidecar["empty_category_names"]
    stdout = capsys.readouterr().out
    assert "observed category counts" in stdout
    data = read_dataset(out1 / "dataset.csv", 4)
    assert data.counts[5][0] == 0  # the sparse item's first category is empty


def fit_setup(tmp_path, categories=4, top_code=3):
    rng = np.random.default_rng(6)
    base = rng.integers(1, top_code + 1, size=(50, 1))
    resp = np.clip(base + rng.integers(-1, 2, size=(50, 3)), 1, top_code)
    data_path = tmp_path / "resp.csv"
    write_response_csv(data_path, resp, ["item_1", "item_2", "item_3"])
    doc = run_config_doc(str(data_path), categories=categories)
    doc["output_dir"] = str(tmp_path / "fit_out")
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(doc))
    return cfg_path, doc


def test_cli_fit_estimates_declared_but_unobserved_category(tmp_path, capsys):
    # codes stop at 3 while the config declares 4 categories: the top
    # threshold has no data and must still be estimated (prior-dominated)
    cfg_path, doc = fit_setup(tmp_path, categories=4, top_code=3)
    assert cli_main(["fit", "--config", str(cfg_path)]) == 0
    out_dir = doc["output_dir"]
    with open(f"{out_dir}/summary.csv", encoding="utf-8") as fh:
        first = fh.readline()
        assert first.startswith("# ordifa") and "seed=9" in first
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:]]
    assert "tau[item_1,3]" in names
    assert "lambda[item_2,1]" in names
    with open(f"{out_dir}/draws.csv", encoding="utf-8") as fh:
        assert fh.readline().startswith("# ordifa")
    assert "fit complete" in capsys.readouterr().out


def test_cli_fit_two_groups_writes_suffixed_files(tmp_path):
    rng = np.random.default_rng(8)
    resp = rng.integers(1, 4, size=(60, 3))
    data_path = tmp_path / "resp.csv"
    write_response_csv(data_path, resp, ["item_1", "item_2", "item_3"],
                       groups=["north"] * 30 + ["south!"] * 30)
    doc = run_config_doc(str(data_path), categories=3)
    doc["output_dir"] = str(tmp_path / "fit_out")
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(doc))
    assert cli_main(["fit", "--config", str(cfg_path)]) == 0
    out = tmp_path / "fit_out"
    assert (out / "draws_north.csv").exists()
    assert (out / "summary_south_.csv").exists()  # label sanitized


def test_cli_fit_sampler_abort_exits_two(tmp_path, monkeypatch, capsys):
    cfg_path, _ = fit_setup(tmp_path, categories=3, top_code=3)

    def boom(*args, **kwargs):
        raise FloatingPointError("lost in space")

    monkeypatch.setattr(io_cli, "fit_dataset", boom)
    assert cli_main(["fit", "--config", str(cfg_path)]) == 2
    assert "lost in space" in capsys.readouterr().err


def test_cli_fit_bad_data_exits_one(tmp_path, capsys):
    cfg_path, doc = fit_setup(tmp_path, categories=3, top_code=3)
    with open(doc["data"], "a", encoding="utf-8") as fh:
        fh.write("1,9,1\n")
    assert cli_main(["fit", "--config", str(cfg_path)]) == 1
    assert "outside the declared range" in capsys.readouterr().err


def test_cli_prior_solve_prints_component_table(tmp_path, capsys):
    tpath = tmp_path / "targets.yaml"
    tpath.write_text(yaml.safe_dump({"E": [-2.0, -0.25], "Var": [0.20, 0.25]}))
    assert cli_main(["prior-solve", "--targets", str(tpath)]) == 0
    out = capsys.readouterr().out
    assert "component" in out
    assert "Normal(0.55, 0.02)" in out
    infeasible = tmp_path / "bad.yaml"
    infeasible.write_text(yaml.safe_dump({"E": [-2.0, -3.0], "Var": [0.2, 0.2]}))
    assert cli_main(["prior-solve", "--targets", str(infeasible)]) == 1


@pytest.mark.parametrize("prior_doc", (
    {"family": "sequential", "mu": 0.0, "dispersion": 0.5, "categories": 4},
    {"family": "induced", "alpha": 1.0, "categories": 4, "seed": 3},
))
def test_cli_prior_predict_writes_ordered_draws(tmp_path, prior_doc):
    ppath = tmp_path / "prior.yaml"
    ppath.write_text(yaml.safe_dump(prior_doc))
    opath = tmp_path / "draws.csv"
    assert cli_main(["prior-predict", "--prior", str(ppath),
                     "--draws", "50", "--out", str(opath)]) == 0
    with open(opath, encoding="utf-8") as fh:
        assert fh.readline().startswith("# ordifa")
        rows = list(csv.reader(fh))
    assert rows[0] == ["draw", "tau_1", "tau_2", "tau_3"]
    assert len(rows) == 51
    taus = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.all(np.diff(taus, axis=1) > 0)


def test_cli_prior_predict_rejects_unusable_hyperparameters(tmp_path, capsys):
    ppath = tmp_path / "prior.yaml"
    ppath.write_text(yaml.safe_dump(
        {"family": "sequential", "dispersion": -1.0, "categories": 4}))
    assert cli_main(["prior-predict", "--prior", str(ppath),
                     "--draws", "10", "--out", str(tmp_path / "o.csv")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_mc_study_writes_study_outputs(tmp_path, capsys):
    plan = {
        "conditions": [{"shape": "symmetric", "n_categories": 3, "n_rows": 40,
                        "n_factors": 1, "items_per_factor": 3}],
        "priors": [{"label": "S", "family": "sequential", "dispersion": 1.5}],
        "replications": 1,
        "base_seed": 5,
        "sampler": {"n_chains": 2, "n_warmup": 50, "n_sampling": 50,
                    "init": "zero"},
        "out_dir": str(tmp_path / "study"),
    }
    ppath = tmp_path / "plan.yaml"
    ppath.write_text(yaml.safe_dump(plan))
    assert cli_main(["mc-study", "--plan", str(ppath)]) == 0
    for name in ("replications.csv", "cells.csv", "tables.txt"):
        text = (tmp_path / "study" / name).read_text()
        assert text.startswith("# ordifa")
    assert "wrote" in capsys.readouterr().out
