import json
from pathlib import Path

import numpy as np
import pytest

from saddlefree.config import (ConfigError, SearchModel, parse_config,
                               resolve)
from saddlefree.experiments import (TRIALS_CSV_COLUMNS, ExperimentError,
                                    build_dataset, random_search, run_experiment,
                                    run_search)
from saddlefree.objectives import Objective
from saddlefree.optim import TRAJECTORY_COLUMNS


def read_artifacts(report):
    out = Path(report.out_dir)
    return {name: (out / name).read_bytes() for name in report.artifacts}


def header_payload(text: str) -> dict:
    first = text.splitlines()[0]
    assert first.startswith("# config: ")
    return json.loads(first[len("# config: "):])


def optimize_doc(**overrides):
    doc = {
        "kind": "optimize",
        "seed": 5,
        "objective": {"surface": {"kind": "classical_saddle"}},
        "optimizers": [{"method": "gd", "learning_rate": 0.05,
                        "max_epochs": 3}],
    }
    doc.update(overrides)
    return doc


# ----------------------------------------------------------------- optimize

def test_optimize_artifacts_and_closed_form(tmp_path):
    report = run_experiment(parse_config(optimize_doc()),
                            out=str(tmp_path / "o"))
    assert report.kind == "optimize"
    assert report.artifacts == ["summary.json", "trajectory.csv"]
    files = read_artifacts(report)
    text = files["trajectory.csv"].decode()
    payload = header_payload(text)
    assert "jobs" not in payload
    assert payload["seed"] == 5
    lines = text.splitlines()
    assert lines[1] == ",".join(TRAJECTORY_COLUMNS)
    assert len(lines) == 2 + 3
    # gd with lr 0.05: x halves and y grows 10% per epoch from (1, 1e-3).
    last = lines[-1].split(",")
    x, y = 0.5**3, 1.1**3 * 1e-3
    assert float(last[1]) == pytest.approx(5 * x * x - y * y, rel=1e-12)

    summary = json.loads(files["summary.json"].decode())
    assert summary["method"] == "gd"
    result = summary["result"]
    assert result["epochs"] == 3
    assert result["converged"] is False
    assert result["final_error"] == pytest.approx(5 * x * x - y * y)
    assert result["abs_final_lambda_min"] == pytest.approx(2.0)
    assert summary == report.summary


def test_optimize_rerun_and_jobs_are_byte_identical(tmp_path):
    out = str(tmp_path / "same")
    first = read_artifacts(run_experiment(parse_config(optimize_doc()),
                                          out=out))
    again = read_artifacts(run_experiment(parse_config(optimize_doc()),
                                          out=out, jobs=4))
    assert first == again


def test_optimize_zero_epochs_writes_header_only(tmp_path):
    doc = optimize_doc(optimizers=[{"method": "gd", "max_epochs": 0}])
    report = run_experiment(parse_config(doc), out=str(tmp_path / "z"))
    lines = read_artifacts(report)["trajectory.csv"].decode().splitlines()
    assert len(lines) == 2
    assert report.summary["result"]["epochs"] == 0


def test_out_flag_beats_config_out(tmp_path):
    doc = optimize_doc(out=str(tmp_path / "from_config"))
    report = run_experiment(parse_config(doc), out=str(tmp_path / "flag"))
    assert report.out_dir == str(tmp_path / "flag")
    assert (tmp_path / "flag" / "summary.json").exists()
    assert not (tmp_path / "from_config").exists()


# ------------------------------------------------------------------ compare

def test_compare_surface_two_methods(tmp_path):
    doc = {
        "kind": "compare", "seed": 1,
        "objective": {"surface": {"kind": "classical_saddle"}},
        "optimizers": [
            {"method": "gd", "learning_rate": 0.05, "max_epochs": 5},
            {"method": "sfn_exact", "max_epochs": 5},
        ],
    }
    report = run_experiment(parse_config(doc), out=str(tmp_path / "c"))
    assert report.artifacts == ["summary.json", "trajectory_gd.csv",
                                "trajectory_sfn_exact.csv"]
    summary = report.summary
    (entry,) = summary["results"]
    assert entry["hidden_units"] is None
    assert set(entry["methods"]) == {"gd", "sfn_exact"}
    # The saddle-free step runs away from the saddle much faster than gd.
    assert (entry["methods"]["sfn_exact"]["final_error"]
            < entry["methods"]["gd"]["final_error"])


def test_compare_hidden_sweep_suffixes(tmp_path):
    doc = {
        "kind": "compare", "seed": 3,
        "objective": {"mlp": {
            "input_dim": 2, "hidden_units": [3, 5], "output_dim": 2,
            "loss": "mse",
            "dataset": {"kind": "blobs", "classes": 2, "per_class": 3,
                        "dim": 2, "separation": 2.0},
        }},
        "optimizers": [{"method": "gd", "learning_rate": 0.1,
                        "max_epochs": 4, "track_lambda_min": False}],
    }
    report = run_experiment(parse_config(doc), out=str(tmp_path / "h"))
    assert report.artifacts == ["summary.json", "trajectory_gd_h3.csv",
                                "trajectory_gd_h5.csv"]
    sizes = [entry["hidden_units"] for entry in report.summary["results"]]
    assert sizes == [3, 5]


def test_compare_search_produces_msgd_entry(tmp_path):
    doc = {
        "kind": "compare", "seed": 7,
        "objective": {"surface": {"kind": "gaussian_quadratic", "n": 4}},
        "optimizers": [{"method": "sfn_exact", "max_epochs": 5}],
        "search": {"samples": 3, "max_epochs": 5},
    }
    report = run_experiment(parse_config(doc), out=str(tmp_path / "s"))
    assert report.artifacts == ["summary.json", "trajectory_msgd.csv",
                                "trajectory_sfn_exact.csv", "trials.csv"]
    (entry,) = report.summary["results"]
    assert set(entry["methods"]) == {"msgd", "sfn_exact"}
    search = entry["search"]
    assert 0 <= search["best_trial"] < 3
    assert search["minibatch_size"] in (8, 16, 32, 64)

    trials = Path(report.out_dir, "trials.csv").read_text().splitlines()
    assert trials[1] == ",".join(TRIALS_CSV_COLUMNS)
    assert len(trials) == 2 + 3
    row = trials[2].split(",")
    assert row[0] == "0" and row[4] == "none"
    assert np.isfinite(float(row[5]))


def test_compare_rejects_search_plus_explicit_msgd(tmp_path):
    doc = {
        "kind": "compare",
        "objective": {"surface": {"kind": "gaussian_quadratic", "n": 4}},
        "optimizers": [{"method": "msgd", "max_epochs": 2}],
        "search": {"samples": 2, "max_epochs": 2},
    }
    with pytest.raises(ConfigError, match="msgd"):
        run_experiment(parse_config(doc), out=str(tmp_path / "x"))


# ------------------------------------------------------------ random search

class ConstantSlope(Objective):
    """Flat error with a constant unit gradient; every run scores alike."""

    dim = 2

    def eval(self, theta):
        return 42.0

    def grad(self, theta):
        return np.ones(2)

    def hvp(self, theta, v):
        return np.zeros(2)


def search_model(**overrides) -> SearchModel:
    fields = dict(samples=4, max_epochs=3, seed=11)
    fields.update(overrides)
    return SearchModel(**fields)


def test_search_sampling_is_seeded_and_in_range():
    search = search_model(samples=50,
                          learning_rate_range=(1e-3, 1e-1),
                          momentum_range=(0.2, 0.8),
                          minibatch_sizes=[4, 8],
                          clip_threshold_range=(0.5, 2.0))
    params, _ = random_search(ConstantSlope(), np.zeros(2), search)
    again, _ = random_search(ConstantSlope(), np.zeros(2), search)
    assert params == again
    for p in params:
        assert 1e-3 <= p["learning_rate"] <= 1e-1
        assert 0.2 <= p["momentum"] <= 0.8
        assert p["minibatch_size"] in (4, 8)
        assert 0.5 <= p["clip_threshold"] <= 2.0
    lrs = [p["learning_rate"] for p in params]
    assert len(set(lrs)) > 40  # continuous draws differ across trials


def test_search_ties_keep_earliest_trial():
    params, best = random_search(ConstantSlope(), np.zeros(2), search_model())
    assert best == 0
    assert all(p["final_error"] == 42.0 for p in params)
    assert all(p["score"] == 42.0 for p in params)


def test_search_with_no_usable_trial_returns_none():
    # Starting at an exact minimum stops every run before its first epoch,
    # so no trial produces a usable score.
    doc = {
        "kind": "compare",
        "objective": {"surface": {"kind": "gutter", "start": [1.0, 0.0]}},
        "search": {"samples": 2, "max_epochs": 3},
    }
    cfg = resolve(parse_config(doc))
    from saddlefree.experiments import build_objective
    obj, theta0 = build_objective(cfg)
    params, best = random_search(obj, theta0, cfg.search)
    assert best is None
    assert all(p["score"] == float("inf") for p in params)


def test_search_workers_do_not_change_outcome():
    search = search_model(samples=6)
    serial = random_search(ConstantSlope(), np.zeros(2), search, workers=1)
    threaded = random_search(ConstantSlope(), np.zeros(2), search, workers=3)
    assert serial == threaded


# --------------------------------------------------------------- run_search

def test_run_search_writes_trials_and_best(tmp_path):
    doc = {
        "kind": "compare", "seed": 2,
        "objective": {"surface": {"kind": "gaussian_quadratic", "n": 4}},
        "search": {"samples": 3, "max_epochs": 4},
    }
    out = str(tmp_path / "rs")
    report = run_search(parse_config(doc), out=out)
    assert report.kind == "search"
    assert report.artifacts == ["summary.json", "trials.csv"]
    (entry,) = report.summary["results"]
    assert entry["hidden_units"] is None
    assert entry["best"]["method"] == "msgd"
    assert np.isfinite(entry["best"]["final_error"])

    rerun = read_artifacts(run_search(parse_config(doc), out=out, jobs=3))
    assert read_artifacts(report) == rerun


def test_run_search_raises_after_writing_when_all_trials_fail(tmp_path):
    doc = {
        "kind": "compare",
        "objective": {"surface": {"kind": "gutter", "start": [1.0, 0.0]}},
        "search": {"samples": 2, "max_epochs": 3},
    }
    out = tmp_path / "fail"
    with pytest.raises(ExperimentError, match="diverged"):
        run_search(parse_config(doc), out=str(out))
    assert (out / "trials.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["results"][0]["best_trial"] is None
    assert "best" not in summary["results"][0]


def test_run_search_requires_compare_with_search(tmp_path):
    with pytest.raises(ConfigError):
        run_search(parse_config(optimize_doc()), out=str(tmp_path / "a"))
    doc = {"kind": "compare",
           "objective": {"surface": {"kind": "gutter"}},
           "optimizers": [{"method": "gd"}]}
    with pytest.raises(ConfigError):
        run_search(parse_config(doc), out=str(tmp_path / "b"))


# ------------------------------------------------------------ critical points

def critical_points_doc():
    return {
        "kind": "critical_points", "seed": 2,
        "objective": {"mlp": {
            "input_dim": 2, "hidden_units": 8, "output_dim": 2,
            "loss": "mse", "init_range": 1.0,
            "dataset": {"kind": "blobs", "classes": 2, "per_class": 4,
                        "dim": 2, "separation": 0.5, "seed": 99},
        }},
        "critical_points": {"n_jobs": 8, "max_iters": 120},
    }


@pytest.fixture(scope="module")
def critical_points_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("cp") / "run"
    return run_experiment(parse_config(critical_points_doc()), out=str(out))


def test_critical_points_artifacts(critical_points_report):
    report = critical_points_report
    assert report.artifacts == ["critical_points.csv", "eigenvalues.csv",
                                "summary.json"]
    files = read_artifacts(report)
    rows = files["critical_points.csv"].decode().splitlines()
    assert len(rows) == 2 + 8  # provenance comment, header, one row per job
    summary = report.summary
    assert summary["n_jobs"] == 8
    assert 0 <= summary["n_converged"] <= 8
    converged_flags = [row.split(",")[2] for row in rows[2:]]
    assert converged_flags.count("true") == summary["n_converged"]


def test_critical_points_summary_statistics(critical_points_report):
    summary = critical_points_report.summary
    if summary["n_converged"] >= 2:
        assert -1.0 <= summary["spearman_epsilon_alpha"] <= 1.0
        assert summary["eig_mean_top_epsilon_quartile"] is not None
    else:
        assert summary["spearman_epsilon_alpha"] is None


def test_critical_points_workers_are_byte_identical(tmp_path):
    out = str(tmp_path / "w")
    first = read_artifacts(
        run_experiment(parse_config(critical_points_doc()), out=out, jobs=1))
    again = read_artifacts(
        run_experiment(parse_config(critical_points_doc()), out=out, jobs=4))
    assert first == again


# ----------------------------------------------------------------- spectrum

def test_spectrum_goe_artifacts(tmp_path):
    doc = {"kind": "spectrum", "seed": 6,
           "spectrum": {"n": 30, "n_seeds": 2, "bins": 5}}
    report = run_experiment(parse_config(doc), out=str(tmp_path / "g"))
    assert report.artifacts == ["eigenvalues_0.csv", "eigenvalues_1.csv",
                                "histogram_0.json", "histogram_1.json",
                                "summary.json"]
    files = read_artifacts(report)
    lines = files["eigenvalues_0.csv"].decode().splitlines()
    assert lines[1] == "eigenvalue"
    values = np.array([float(v) for v in lines[2:]])
    assert values.shape == (30,)
    assert np.all(np.diff(values) <= 0)

    hist = json.loads(files["histogram_0.json"].decode())
    assert len(hist["counts"]) == 5
    assert sum(hist["counts"]) == 30
    assert len(hist["edges"]) == 6

    spectra = report.summary["spectra"]
    assert len(spectra) == 2
    for entry in spectra:
        assert entry["lambda_min"] == pytest.approx(min(values), abs=10.0)
        assert 0.2 <= entry["negative_fraction"] <= 0.8


def test_spectrum_hessian_at_init(tmp_path):
    doc = {
        "kind": "spectrum", "seed": 1,
        "objective": {"mlp": {
            "input_dim": 2, "hidden_units": 4, "output_dim": 2,
            "dataset": {"kind": "blobs", "classes": 2, "per_class": 3},
        }},
        "spectrum": {"source": "hessian_at_init", "seeds": [1, 2],
                     "bins": 4},
    }
    report = run_experiment(parse_config(doc), out=str(tmp_path / "hi"))
    lines = read_artifacts(report)["eigenvalues_0.csv"].decode().splitlines()
    assert len(lines) == 2 + 22  # 2-4-2 network has 22 parameters
    assert [e["seed"] for e in report.summary["spectra"]] == [1, 2]


def test_spectrum_rerun_is_byte_identical(tmp_path):
    doc = {"kind": "spectrum", "seed": 6,
           "spectrum": {"n": 25, "n_seeds": 2, "bins": 4}}
    out = str(tmp_path / "r")
    first = read_artifacts(run_experiment(parse_config(doc), out=out))
    again = read_artifacts(run_experiment(parse_config(doc), out=out))
    assert first == again


# ------------------------------------------------------------------ datasets

def test_build_dataset_errors(tmp_path):
    from saddlefree.config import IdxDatasetModel
    missing = IdxDatasetModel(kind="idx", images=str(tmp_path / "none.idx"),
                              labels=str(tmp_path / "none2.idx"))
    with pytest.raises(ConfigError, match="missing"):
        build_dataset(missing)

    images = tmp_path / "garbage.idx"
    labels = tmp_path / "garbage2.idx"
    images.write_bytes(b"\x00\x00\x00\x00\x00\x00\x00\x00")
    labels.write_bytes(b"\x00\x00\x00\x00")
    bad = IdxDatasetModel(kind="idx", images=str(images), labels=str(labels))
    with pytest.raises(ExperimentError, match="IDX"):
        build_dataset(bad)
