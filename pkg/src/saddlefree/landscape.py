"""Locating and characterizing critical points of small objectives.

The finder runs Newton's method on the gradient with a Levenberg-style
trust schedule, which converges to critical points of any index rather
than only minima.  Each located point is characterized by its error, its
Hessian spectrum, and the fraction of descent directions among its
numerically significant eigenvalues.

Sampling follows a two-arm protocol: half the search jobs start from
noise-perturbed snapshots of short training trajectories, the other half
from uniform draws in the centered unit cube, so the survey covers both
the region optimizers actually visit and the wider landscape.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .linalg import DenseSymmetric, as_vector, sym_eig
from .objectives import Objective, goe_matrix
from .optim import RunResult

NOISE_AMPLITUDES = (1e-1, 1e-2, 1e-3, 1e-4)

RECORD_CSV_COLUMNS = ("job_id", "provenance", "converged", "epsilon",
                      "grad_norm", "alpha", "zero_count", "n_eigs")


class NotConvergedError(Exception):
    """Finder ran out of iterations; carries the best point reached."""

    def __init__(self, record: "CriticalPointRecord"):
        super().__init__(
            f"no critical point within tolerance after "
            f"{record.iterations} iterations (grad_norm="
            f"{record.grad_norm:.3e})")
        self.record = record


def index_tolerance(eigenvalues: np.ndarray) -> float:
    """Threshold below which an eigenvalue counts as numerically zero."""
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    scale = float(np.abs(eigenvalues).max()) if eigenvalues.size else 0.0
    return 1e-6 * max(1.0, scale)


def index_of(eigenvalues: np.ndarray) -> float:
    """Fraction of significantly negative eigenvalues among significant ones.

    Near-zero eigenvalues are excluded from numerator and denominator
    alike; a spectrum of only near-zeros has index 0 by convention.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    tau = index_tolerance(eigenvalues)
    significant = int(np.sum(np.abs(eigenvalues) > tau))
    if significant == 0:
        return 0.0
    return int(np.sum(eigenvalues < -tau)) / significant


def zero_count_of(eigenvalues: np.ndarray) -> int:
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    return int(np.sum(np.abs(eigenvalues) <= index_tolerance(eigenvalues)))


def hessian_eigenvalues(obj: Objective, theta: np.ndarray) -> np.ndarray:
    """Dense Hessian spectrum at ``theta``, descending."""
    return sym_eig(obj.dense_hessian(theta)).eigenvalues


def goe_spectrum(n: int, seed: int) -> np.ndarray:
    """Spectrum of one seeded Gaussian orthogonal ensemble draw, descending."""
    return sym_eig(DenseSymmetric(goe_matrix(n, seed))).eigenvalues


def negative_fraction(eigenvalues: np.ndarray) -> float:
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if eigenvalues.size == 0:
        raise ValueError("empty spectrum")
    return float(np.mean(eigenvalues < 0.0))


@dataclass(frozen=True)
class FinderConfig:
    """Knobs of the damped Newton-on-the-gradient solver."""

    grad_tol: float = 1e-8
    max_iters: int = 500
    mu0: float = 0.0

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.mu0 < 0:
            raise ValueError("mu0 must be >= 0")


@dataclass(frozen=True)
class CriticalPointRecord:
    """One finder outcome, converged or not, with its local spectrum."""

    theta: np.ndarray
    epsilon: float
    grad_norm: float
    eigenvalues: np.ndarray
    alpha: float
    zero_count: int
    converged: bool
    iterations: int
    job_id: int = -1
    provenance: str = "direct"

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def eig_mean(self) -> float:
        return float(self.eigenvalues.mean())

    def csv_row(self) -> str:
        return ",".join([
            str(self.job_id),
            self.provenance,
            "true" if self.converged else "false",
            repr(self.epsilon),
            repr(self.grad_norm),
            repr(self.alpha),
            str(self.zero_count),
            str(len(self.eigenvalues)),
        ])


def _assemble_record(obj, theta, grad_norm, converged, iterations, job_id,
                     provenance) -> CriticalPointRecord:
    eigenvalues = hessian_eigenvalues(obj, theta)
    return CriticalPointRecord(
        theta=theta, epsilon=obj.eval(theta), grad_norm=grad_norm,
        eigenvalues=eigenvalues, alpha=index_of(eigenvalues),
        zero_count=zero_count_of(eigenvalues), converged=converged,
        iterations=iterations, job_id=job_id, provenance=provenance)


def find_critical_point(obj: Objective, theta0: np.ndarray,
                        cfg: FinderConfig = FinderConfig(),
                        job_id: int = -1,
                        provenance: str = "direct") -> CriticalPointRecord:
    """Drive the gradient to zero with damped Newton iterations.

    Each iteration solves (H + mu I) d = -g and moves to the new point
    whenever it is finite; mu relaxes tenfold when the step reduced the
    gradient norm and stiffens tenfold when it did not (or the solve was
    singular or produced a non-finite point).  The gradient norm is
    allowed to rise transiently — insisting on monotone decrease wedges
    the iteration on plateaus, where the only norm-decreasing directions
    vanish.  Raises :class:`NotConvergedError` carrying the best point
    reached when the iteration budget runs out.
    """
    theta = as_vector(theta0).copy()
    g = obj.grad(theta)
    grad_norm = float(np.linalg.norm(g))
    best_theta, best_norm = theta.copy(), grad_norm
    mu = cfg.mu0
    iterations = 0
    while (grad_norm >= cfg.grad_tol and iterations < cfg.max_iters
           and np.isfinite(mu)):
        iterations += 1
        try:
            delta = np.linalg.solve(
                obj.dense_hessian(theta).matrix + mu * np.eye(obj.dim), -g)
        except np.linalg.LinAlgError:
            delta = None
        improved = False
        if delta is not None and np.all(np.isfinite(delta)):
            candidate = theta + delta
            g_new = obj.grad(candidate)
            new_norm = float(np.linalg.norm(g_new))
            if np.isfinite(new_norm) and np.isfinite(obj.eval(candidate)):
                improved = new_norm < grad_norm
                theta, g, grad_norm = candidate, g_new, new_norm
                if grad_norm < best_norm:
                    best_theta, best_norm = theta.copy(), grad_norm
        if improved:
            mu /= 10.0
        else:
            mu = mu * 10.0 if mu > 0.0 else 1e-6
    converged = grad_norm < cfg.grad_tol
    if not converged:
        theta, grad_norm = best_theta, best_norm
    record = _assemble_record(obj, theta, grad_norm, converged, iterations,
                              job_id, provenance)
    if not converged:
        raise NotConvergedError(record)
    return record


def _job_start(obj: Objective, job: int, seed: int, snapshot_pool,
               noise_amplitudes, is_snapshot_arm: bool):
    """Starting point and provenance for one search job."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, job)))
    if is_snapshot_arm:
        run_idx = int(rng.integers(len(snapshot_pool)))
        epoch_idx = int(rng.integers(len(snapshot_pool[run_idx])))
        epoch, snap = snapshot_pool[run_idx][epoch_idx]
        amp = float(noise_amplitudes[int(rng.integers(len(noise_amplitudes)))])
        start = snap + amp * rng.uniform(-1.0, 1.0, obj.dim)
        provenance = (f"trajectory_snapshot(run={run_idx};epoch={epoch};"
                      f"amplitude={amp!r})")
    else:
        start = rng.uniform(-1.0, 1.0, obj.dim)
        provenance = f"random_cube(seed={job})"
    return start, provenance


def sample_critical_points(obj: Objective, runs: Sequence[RunResult],
                           n_jobs: int = 100, seed: int = 0,
                           noise_amplitudes=NOISE_AMPLITUDES,
                           finder: FinderConfig = FinderConfig(),
                           workers: int = 1) -> List[CriticalPointRecord]:
    """Survey the landscape with ``n_jobs`` independent finder runs.

    Half the jobs (the first ids) perturb a randomly chosen snapshot of a
    randomly chosen run by uniform noise of a randomly chosen amplitude;
    the rest start from uniform draws in [-1, 1]^dim.  With no runs to
    snapshot, every job uses the cube arm.  Non-converged jobs are kept,
    flagged, so the yield is auditable.  Results come back ordered by job
    id and are a pure function of (objective, runs, n_jobs, seed) no
    matter how many workers share the load.
    """
    if n_jobs < 1:
        raise ValueError("n_jobs must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if len(noise_amplitudes) == 0:
        raise ValueError("need at least one noise amplitude")
    snapshot_pool = [r.snapshots for r in runs if r.snapshots]
    snapshot_jobs = n_jobs // 2 if snapshot_pool else 0

    def _solve(job: int) -> CriticalPointRecord:
        start, provenance = _job_start(obj, job, seed, snapshot_pool,
                                       noise_amplitudes, job < snapshot_jobs)
        try:
            return find_critical_point(obj, start, finder, job_id=job,
                                       provenance=provenance)
        except NotConvergedError as exc:
            return exc.record

    if workers == 1:
        records = [_solve(job) for job in range(n_jobs)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_solve, range(n_jobs)))
    return sorted(records, key=lambda r: r.job_id)


def records_to_csv_text(records: Sequence[CriticalPointRecord]) -> str:
    lines = [",".join(RECORD_CSV_COLUMNS)]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"


def eigenvalues_sidecar_text(records: Sequence[CriticalPointRecord]) -> str:
    """One row per record: job id followed by its spectrum, descending."""
    lines = []
    for r in records:
        lines.append(",".join([str(r.job_id)]
                              + [repr(float(v)) for v in r.eigenvalues]))
    return "\n".join(lines) + "\n"


def morse_frame(obj: Objective, record: CriticalPointRecord,
                dtheta: np.ndarray) -> Tuple[np.ndarray, float]:
    """Eigenvector coordinates of a displacement and the local quadratic
    model value epsilon + (1/2) sum_i lambda_i dv_i^2."""
    dtheta = as_vector(dtheta)
    dec = sym_eig(obj.dense_hessian(record.theta))
    dv = dec.eigenvectors.T @ dtheta
    model = record.epsilon + 0.5 * float(dec.eigenvalues @ (dv * dv))
    return dv, model


@dataclass(frozen=True)
class SpectrumHistogram:
    """Binned eigenvalue counts plus the near-zero mode reported apart."""

    edges: Tuple[float, ...]
    counts: Tuple[int, ...]
    zero_mode_count: int
    epsilon: float

    def to_json_dict(self) -> dict:
        return {"edges": list(self.edges), "counts": list(self.counts),
                "zero_mode_count": self.zero_mode_count,
                "epsilon": self.epsilon}


def histogram_from_eigenvalues(eigenvalues: np.ndarray, bins: int,
                               epsilon: float = float("nan")
                               ) -> SpectrumHistogram:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if eigenvalues.size == 0:
        raise ValueError("empty spectrum")
    counts, edges = np.histogram(eigenvalues, bins=bins)
    return SpectrumHistogram(
        edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        zero_mode_count=zero_count_of(eigenvalues),
        epsilon=float(epsilon))


def spectrum_histogram(record: CriticalPointRecord,
                       bins: int) -> SpectrumHistogram:
    return histogram_from_eigenvalues(record.eigenvalues, bins,
                                      epsilon=record.epsilon)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.shape[0])
    i = 0
    while i < values.shape[0]:
        j = i
        while (j + 1 < values.shape[0]
               and values[order[j + 1]] == values[order[i]]):
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks on ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D of equal length")
    if x.shape[0] < 2:
        raise ValueError("need at least two observations")
    rx = _average_ranks(x) - (x.shape[0] + 1) / 2.0
    ry = _average_ranks(y) - (y.shape[0] + 1) / 2.0
    denom = float(np.linalg.norm(rx) * np.linalg.norm(ry))
    if denom == 0.0:
        raise ValueError("rank correlation undefined for constant input")
    return float(rx @ ry / denom)


def error_index_relation(records: Sequence[CriticalPointRecord]) -> float:
    """Spearman correlation between error and index over converged records."""
    converged = [r for r in records if r.converged]
    if len(converged) < 2:
        raise ValueError("need at least two converged critical points")
    return spearman([r.epsilon for r in converged],
                    [r.alpha for r in converged])
