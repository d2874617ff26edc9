"""Experiment orchestration and artifact writing.

Turns a validated :class:`~saddlefree.config.ExperimentConfig` into domain
objects, drives the runs, and writes plot data: trajectory CSVs, search
trial tables, critical-point surveys with eigenvalue sidecars, and
spectrum histograms.

Every artifact embeds the fully resolved config (CSV files as a leading
``# config:`` comment, JSON files under a ``config`` key) minus the worker
count, which by contract must not influence a single output byte.  All
text is written with LF endings through ``write_bytes`` so artifacts are
bit-exact across platforms and reruns.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    MlpModel,
    OptimizerModel,
    SearchModel,
    SurfaceModel,
    canonical_json,
    derive_seed,
    resolve,
)
from .landscape import (
    CriticalPointRecord,
    FinderConfig,
    eigenvalues_sidecar_text,
    error_index_relation,
    goe_spectrum,
    hessian_eigenvalues,
    histogram_from_eigenvalues,
    records_to_csv_text,
    sample_critical_points,
)
from .mlp import (
    Dataset,
    IdxFormatError,
    MlpSpec,
    downsample,
    init_theta,
    load_idx,
    make_mlp,
    synth_blobs,
)
from .objectives import Objective, SurfaceSpec, make_surface
from .optim import OptimizerConfig, RunResult, run


class ExperimentError(Exception):
    """An experiment failed at runtime (not a config problem)."""


@dataclass
class ExperimentReport:
    """What a finished experiment hands back to the CLI/service."""

    kind: str
    out_dir: str
    artifacts: List[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _provenance(resolved: ExperimentConfig) -> dict:
    data = resolved.model_dump(mode="json")
    data.pop("jobs", None)  # scheduling must never show up in artifacts
    return data


def _csv_header_comment(resolved: ExperimentConfig) -> str:
    return ("# config: "
            + json.dumps(_provenance(resolved), sort_keys=True,
                         separators=(",", ":"))
            + "\n")


def _json_text(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write(out_dir: Path, name: str, text: str, artifacts: List[str]):
    (out_dir / name).write_bytes(text.encode("utf-8"))
    artifacts.append(name)


def build_dataset(model) -> Dataset:
    if model.kind == "blobs":
        return synth_blobs(model.classes, model.per_class, model.dim,
                           model.separation, model.seed)
    try:
        data = load_idx(model.images, model.labels)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file missing: {exc}") from exc
    except IdxFormatError as exc:
        raise ExperimentError(f"unreadable IDX data: {exc}") from exc
    if model.downsample is not None:
        rows, cols = model.downsample
        data = downsample(data, rows, cols)
    return data


def _build_mlp(mlp: MlpModel, hidden: int,
               data: Optional[Dataset] = None) -> Tuple[Objective, np.ndarray]:
    if data is None:
        data = build_dataset(mlp.dataset)
    spec = MlpSpec(input_dim=mlp.input_dim, hidden_units=hidden,
                   output_dim=mlp.output_dim, loss=mlp.loss,
                   init_range=mlp.init_range, seed=mlp.init_seed)
    try:
        obj = make_mlp(spec, data)
    except ValueError as exc:
        raise ConfigError(f"mlp/dataset mismatch: {exc}") from exc
    return obj, init_theta(spec)


def _build_surface(surface: SurfaceModel) -> Tuple[Objective, np.ndarray]:
    obj = make_surface(SurfaceSpec(kind=surface.kind, seed=surface.seed,
                                   n=surface.n))
    return obj, np.asarray(surface.start, dtype=np.float64)


def build_objective(resolved: ExperimentConfig,
                    hidden: Optional[int] = None,
                    data: Optional[Dataset] = None
                    ) -> Tuple[Objective, np.ndarray]:
    """Objective plus starting point for one model size of the config."""
    objective = resolved.objective
    if objective.surface is not None:
        return _build_surface(objective.surface)
    sizes = objective.mlp.hidden_sizes()
    return _build_mlp(objective.mlp, sizes[0] if hidden is None else hidden,
                      data)


# ---------------------------------------------------------------------------
# random search


TRIALS_CSV_COLUMNS = ("trial", "learning_rate", "momentum", "minibatch_size",
                      "clip_threshold", "final_error")


def _sample_trial_params(search: SearchModel, trial: int) -> Dict:
    rng = np.random.default_rng(np.random.SeedSequence((search.seed, trial)))
    lo, hi = search.learning_rate_range
    lr = float(np.exp(rng.uniform(math.log(lo), math.log(hi))))
    momentum = float(rng.uniform(*search.momentum_range))
    batch = int(search.minibatch_sizes[
        int(rng.integers(len(search.minibatch_sizes)))])
    clip = None
    if search.clip_threshold_range is not None:
        clo, chi = search.clip_threshold_range
        clip = float(np.exp(rng.uniform(math.log(clo), math.log(chi))))
    return {"trial": trial, "learning_rate": lr, "momentum": momentum,
            "minibatch_size": batch, "clip_threshold": clip}


def _trial_config(search: SearchModel, params: Dict) -> OptimizerConfig:
    return OptimizerConfig(
        method="msgd", learning_rate=params["learning_rate"],
        momentum=params["momentum"], minibatch_size=params["minibatch_size"],
        clip_threshold=params["clip_threshold"],
        max_epochs=search.max_epochs,
        seed=derive_seed(search.seed, "trial-run", params["trial"]),
        track_lambda_min=False)


def random_search(obj: Objective, theta0: np.ndarray, search: SearchModel,
                  workers: int = 1):
    """Seeded random search over msgd hyperparameters.

    Every trial is scored by the final full-batch training error; a trial
    whose log ends non-finite (or empty) scores infinitely bad.  Returns
    the trial parameter dicts (each augmented with its score) and the
    winning trial's index, ``None`` when every trial diverged.  Ties keep
    the earliest trial.
    """
    params = [_sample_trial_params(search, t) for t in range(search.samples)]

    def _run_one(p: Dict) -> RunResult:
        return run(obj, theta0, _trial_config(search, p))

    if workers == 1:
        results = [_run_one(p) for p in params]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, params))

    best = None
    for t, (p, result) in enumerate(zip(params, results)):
        score = result.final_error
        if not (len(result.trajectory) and np.isfinite(score)):
            score = float("inf")
        p["final_error"] = result.final_error
        p["score"] = score
        if score < float("inf") and (best is None or score < params[best]["score"]):
            best = t
    return params, best


def _trials_csv_text(resolved: ExperimentConfig,
                     params: Sequence[Dict]) -> str:
    lines = [_csv_header_comment(resolved).rstrip("\n"),
             ",".join(TRIALS_CSV_COLUMNS)]
    for p in params:
        clip = "none" if p["clip_threshold"] is None else repr(p["clip_threshold"])
        lines.append(",".join([
            str(p["trial"]), repr(p["learning_rate"]), repr(p["momentum"]),
            str(p["minibatch_size"]), clip, repr(p["final_error"]),
        ]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiment kinds


def _method_summary(result: RunResult) -> dict:
    return {
        "final_error": result.final_error,
        "final_grad_norm": result.final_grad_norm,
        "final_lambda_min": result.final_lambda_min,
        "abs_final_lambda_min": abs(result.final_lambda_min),
        "epochs": len(result.trajectory),
        "converged": result.converged,
        "stop_reason": result.stop_reason,
    }


def _run_optimize(resolved: ExperimentConfig, out_dir: Path,
                  workers: int) -> ExperimentReport:
    obj, theta0 = build_objective(resolved)
    result = run(obj, theta0, resolved.optimizers[0].to_runtime())
    artifacts: List[str] = []
    _write(out_dir, "trajectory.csv",
           _csv_header_comment(resolved) + result.trajectory.to_csv_text(),
           artifacts)
    summary = {"config": _provenance(resolved),
               "method": resolved.optimizers[0].name,
               "result": _method_summary(result)}
    _write(out_dir, "summary.json", _json_text(summary), artifacts)
    return ExperimentReport(kind=resolved.kind, out_dir=str(out_dir),
                            artifacts=sorted(artifacts), summary=summary)


def _compare_one_size(resolved: ExperimentConfig, obj: Objective,
                      theta0: np.ndarray, suffix: str, out_dir: Path,
                      artifacts: List[str], workers: int) -> dict:
    size_summary: dict = {"methods": {}}
    if resolved.search is not None:
        params, best = random_search(obj, theta0, resolved.search, workers)
        _write(out_dir, f"trials{suffix}.csv",
               _trials_csv_text(resolved, params), artifacts)
        if best is None:
            raise ExperimentError(
                f"random search: all {len(params)} trials diverged "
                f"(trials{suffix}.csv written)")
        chosen = params[best]
        msgd_cfg = OptimizerConfig(
            method="msgd", learning_rate=chosen["learning_rate"],
            momentum=chosen["momentum"],
            minibatch_size=chosen["minibatch_size"],
            clip_threshold=chosen["clip_threshold"],
            max_epochs=resolved.search.max_epochs,
            seed=derive_seed(resolved.search.seed, "trial-run", best))
        result = run(obj, theta0, msgd_cfg)
        _write(out_dir, f"trajectory_msgd{suffix}.csv",
               _csv_header_comment(resolved) + result.trajectory.to_csv_text(),
               artifacts)
        size_summary["methods"]["msgd"] = _method_summary(result)
        size_summary["search"] = {
            "best_trial": best,
            "learning_rate": chosen["learning_rate"],
            "momentum": chosen["momentum"],
            "minibatch_size": chosen["minibatch_size"],
            "clip_threshold": chosen["clip_threshold"],
        }
    for opt in resolved.optimizers:
        result = run(obj, theta0, opt.to_runtime())
        _write(out_dir, f"trajectory_{opt.name}{suffix}.csv",
               _csv_header_comment(resolved) + result.trajectory.to_csv_text(),
               artifacts)
        size_summary["methods"][opt.name] = _method_summary(result)
    return size_summary


def _run_compare(resolved: ExperimentConfig, out_dir: Path,
                 workers: int) -> ExperimentReport:
    if resolved.search is not None and any(
            opt.name == "msgd" for opt in resolved.optimizers):
        raise ConfigError(
            "search produces the msgd entry; rename the explicit msgd "
            "optimizer or drop the search section")
    artifacts: List[str] = []
    mlp = resolved.objective.mlp
    results = []
    if mlp is None:
        obj, theta0 = build_objective(resolved)
        entry = _compare_one_size(resolved, obj, theta0, "", out_dir,
                                  artifacts, workers)
        entry["hidden_units"] = None
        results.append(entry)
    else:
        sizes = mlp.hidden_sizes()
        data = build_dataset(mlp.dataset)
        for h in sizes:
            obj, theta0 = _build_mlp(mlp, h, data)
            suffix = f"_h{h}" if len(sizes) > 1 else ""
            entry = _compare_one_size(resolved, obj, theta0, suffix, out_dir,
                                      artifacts, workers)
            entry["hidden_units"] = h
            results.append(entry)
    summary = {"config": _provenance(resolved), "results": results}
    _write(out_dir, "summary.json", _json_text(summary), artifacts)
    return ExperimentReport(kind=resolved.kind, out_dir=str(out_dir),
                            artifacts=sorted(artifacts), summary=summary)


def _quartile_means(records: Sequence[CriticalPointRecord]):
    converged = sorted((r for r in records if r.converged),
                       key=lambda r: r.epsilon)
    if not converged:
        return None, None
    k = max(1, len(converged) // 4)
    bottom = converged[:k]
    top = converged[-k:]
    return (float(np.mean([r.eig_mean for r in top])),
            float(np.mean([r.eig_mean for r in bottom])))


def _run_critical_points(resolved: ExperimentConfig, out_dir: Path,
                         workers: int) -> ExperimentReport:
    cp = resolved.critical_points
    obj, theta0 = build_objective(resolved)
    warmup = cp.warmup.to_runtime()
    runs = [run(obj, theta0, warmup)]
    records = sample_critical_points(
        obj, runs, n_jobs=cp.n_jobs, seed=cp.seed,
        noise_amplitudes=tuple(cp.noise_amplitudes),
        finder=FinderConfig(grad_tol=cp.grad_tol, max_iters=cp.max_iters,
                            mu0=cp.mu0),
        workers=workers)
    artifacts: List[str] = []
    _write(out_dir, "critical_points.csv",
           _csv_header_comment(resolved) + records_to_csv_text(records),
           artifacts)
    _write(out_dir, "eigenvalues.csv",
           _csv_header_comment(resolved) + eigenvalues_sidecar_text(records),
           artifacts)
    converged = [r for r in records if r.converged]
    rho = None
    if len(converged) >= 2:
        try:
            rho = error_index_relation(records)
        except ValueError:
            rho = None
    top_mean, bottom_mean = _quartile_means(records)
    summary = {
        "config": _provenance(resolved),
        "n_jobs": cp.n_jobs,
        "n_converged": len(converged),
        "spearman_epsilon_alpha": rho,
        "eig_mean_top_epsilon_quartile": top_mean,
        "eig_mean_bottom_epsilon_quartile": bottom_mean,
    }
    _write(out_dir, "summary.json", _json_text(summary), artifacts)
    return ExperimentReport(kind=resolved.kind, out_dir=str(out_dir),
                            artifacts=sorted(artifacts), summary=summary)


def _spectrum_eigenvalues(resolved: ExperimentConfig) -> List[np.ndarray]:
    sp = resolved.spectrum
    if sp.source == "goe":
        return [goe_spectrum(sp.n, s) for s in sp.seeds]
    mlp = resolved.objective.mlp
    if mlp is None:
        raise ConfigError("hessian_at_init spectra need an mlp objective")
    data = build_dataset(mlp.dataset)
    spectra = []
    for s in sp.seeds:
        spec = MlpSpec(input_dim=mlp.input_dim,
                       hidden_units=mlp.hidden_sizes()[0],
                       output_dim=mlp.output_dim, loss=mlp.loss,
                       init_range=mlp.init_range, seed=mlp.init_seed)
        obj = make_mlp(spec, data)
        spectra.append(hessian_eigenvalues(obj, init_theta(spec, seed=s)))
    return spectra


def _run_spectrum(resolved: ExperimentConfig, out_dir: Path,
                  workers: int) -> ExperimentReport:
    sp = resolved.spectrum
    spectra = _spectrum_eigenvalues(resolved)
    artifacts: List[str] = []
    per_seed = []
    for i, (seed, eigs) in enumerate(zip(sp.seeds, spectra)):
        lines = [_csv_header_comment(resolved).rstrip("\n"), "eigenvalue"]
        lines.extend(repr(float(v)) for v in eigs)
        _write(out_dir, f"eigenvalues_{i}.csv", "\n".join(lines) + "\n",
               artifacts)
        hist = histogram_from_eigenvalues(eigs, sp.bins)
        payload = {"config": _provenance(resolved), "seed": seed}
        payload.update(hist.to_json_dict())
        _write(out_dir, f"histogram_{i}.json", _json_text(payload), artifacts)
        per_seed.append({
            "seed": seed,
            "negative_fraction": float(np.mean(eigs < 0.0)),
            "lambda_min": float(eigs[-1]),
            "lambda_max": float(eigs[0]),
        })
    summary = {"config": _provenance(resolved), "spectra": per_seed}
    _write(out_dir, "summary.json", _json_text(summary), artifacts)
    return ExperimentReport(kind=resolved.kind, out_dir=str(out_dir),
                            artifacts=sorted(artifacts), summary=summary)


def run_search(cfg: ExperimentConfig, out: Optional[str] = None,
               jobs: Optional[int] = None) -> ExperimentReport:
    """Run only the hyperparameter search of a compare-shaped config.

    Writes the per-size trial tables and a summary naming each size's
    winning msgd settings.  Raises when a size loses every trial, after
    its trial table is safely on disk.
    """
    updates = {}
    if out is not None:
        updates["out"] = out
    if jobs is not None:
        updates["jobs"] = jobs
    if updates:
        cfg = cfg.model_copy(update=updates)
    if cfg.kind != "compare" or cfg.search is None:
        raise ConfigError(
            "search needs a compare config with a [search] section")
    resolved = resolve(cfg)
    out_dir = Path(resolved.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: List[str] = []
    results = []
    mlp = resolved.objective.mlp
    sizes = [None] if mlp is None else mlp.hidden_sizes()
    data = None if mlp is None else build_dataset(mlp.dataset)
    failures = []
    for h in sizes:
        obj, theta0 = build_objective(resolved, hidden=h, data=data)
        suffix = f"_h{h}" if len(sizes) > 1 else ""
        params, best = random_search(obj, theta0, resolved.search,
                                     resolved.jobs)
        _write(out_dir, f"trials{suffix}.csv",
               _trials_csv_text(resolved, params), artifacts)
        entry = {"hidden_units": h, "best_trial": best}
        if best is None:
            failures.append(h)
        else:
            chosen = params[best]
            entry["best"] = {
                "method": "msgd",
                "learning_rate": chosen["learning_rate"],
                "momentum": chosen["momentum"],
                "minibatch_size": chosen["minibatch_size"],
                "clip_threshold": chosen["clip_threshold"],
                "final_error": chosen["final_error"],
            }
        results.append(entry)
    summary = {"config": _provenance(resolved), "results": results}
    _write(out_dir, "summary.json", _json_text(summary), artifacts)
    if failures:
        raise ExperimentError(
            f"random search: every trial diverged for sizes {failures} "
            f"(trial tables written)")
    return ExperimentReport(kind="search", out_dir=str(out_dir),
                            artifacts=sorted(artifacts), summary=summary)


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None,
                   jobs: Optional[int] = None) -> ExperimentReport:
    """Resolve ``cfg``, run it, and write its artifacts.

    ``out`` and ``jobs`` override the config's fields (the CLI flags).
    """
    updates = {}
    if out is not None:
        updates["out"] = out
    if jobs is not None:
        updates["jobs"] = jobs
    if updates:
        cfg = cfg.model_copy(update=updates)
    resolved = resolve(cfg)
    out_dir = Path(resolved.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = resolved.jobs
    if resolved.kind == "optimize":
        return _run_optimize(resolved, out_dir, workers)
    if resolved.kind == "compare":
        return _run_compare(resolved, out_dir, workers)
    if resolved.kind == "critical_points":
        return _run_critical_points(resolved, out_dir, workers)
    return _run_spectrum(resolved, out_dir, workers)
