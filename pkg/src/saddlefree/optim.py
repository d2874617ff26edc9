"""Optimizers over :class:`~saddlefree.objectives.Objective` surfaces.

Five methods share one driver: plain gradient descent, minibatch momentum
SGD, damped Newton, an exact saddle-free variant that rectifies the Hessian
spectrum through its eigendecomposition, and a Krylov-subspace saddle-free
variant for objectives too large to factor densely.  The curvature methods
choose their damping from a grid by evaluating the true objective at each
candidate step and keeping the lowest value, with exact ties broken toward
the smaller damping (the longer step), so no per-surface step size needs
tuning.

Trajectories are recorded per epoch and serialize to CSV with timings
zeroed by default, keeping artifacts byte-stable across reruns.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .linalg import (
    as_vector,
    lanczos,
    solve_floor,
    subspace_hessian,
    sym_eig,
)
from .objectives import Objective

METHODS = ("gd", "msgd", "damped_newton", "sfn_exact", "sfn_krylov")

DEFAULT_DAMPING_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)

# Trajectory snapshots are kept for the early epochs only; later parameters
# are represented well enough by theta_final.
SNAPSHOT_EPOCH_CAP = 20

TRAJECTORY_COLUMNS = ("epoch", "error", "grad_norm", "lambda_min",
                      "step_norm", "wall_ms")

# Basis size used when the smallest eigenvalue must be estimated matrix-free.
LAMBDA_MIN_KRYLOV_K = 64


class DivergedError(Exception):
    """Raised when a step rule meets a non-finite gradient or loses every
    candidate to overflow."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Method selection plus every knob the driver reads.

    Curvature methods ignore the rate/momentum fields and vice versa;
    validation only checks the fields the chosen method uses.
    ``allow_indefinite`` lets "damped_newton" accept shifts that leave the
    system indefinite but solvable, which is how the pure Newton step
    (grid ``(0,)``) is expressed.  ``outer_steps`` is accepted for
    completeness but the driver runs one outer Krylov rebuild per epoch,
    so ``max_epochs`` governs how many happen.
    """

    method: str = "gd"
    learning_rate: float = 0.01
    momentum: float = 0.0
    minibatch_size: Optional[int] = None
    clip_threshold: Optional[float] = None
    max_epochs: int = 100
    grad_tol: float = 1e-10
    damping_grid: Tuple[float, ...] = DEFAULT_DAMPING_GRID
    krylov_k: int = 32
    inner_steps: int = 1
    outer_steps: Optional[int] = None
    seed: int = 0
    allow_indefinite: bool = False
    track_lambda_min: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, "
                             f"got {self.method!r}")
        if self.method in ("gd", "msgd") and self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.clip_threshold is not None and self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be > 0")
        if len(self.damping_grid) == 0:
            raise ValueError("damping_grid must be non-empty")
        if any(a < 0 for a in self.damping_grid):
            raise ValueError("damping values must be >= 0")
        if self.krylov_k < 1:
            raise ValueError("krylov_k must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.outer_steps is not None and self.outer_steps < 1:
            raise ValueError("outer_steps must be >= 1")
        object.__setattr__(self, "damping_grid",
                           tuple(float(a) for a in self.damping_grid))


@dataclass
class TrajectoryLog:
    """Per-epoch scalars of one optimization run.

    Only finite errors are recorded; a run that goes non-finite stops
    with its log truncated at the last healthy epoch.
    """

    epochs: List[int] = field(default_factory=list)
    errors: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    lambda_mins: List[float] = field(default_factory=list)
    step_norms: List[float] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)

    def append(self, epoch, error, grad_norm, lambda_min, step_norm, wall):
        self.epochs.append(int(epoch))
        self.errors.append(float(error))
        self.grad_norms.append(float(grad_norm))
        self.lambda_mins.append(float(lambda_min))
        self.step_norms.append(float(step_norm))
        self.wall_ms.append(float(wall))

    def __len__(self):
        return len(self.epochs)

    def first_epoch_below(self, threshold: float) -> Optional[int]:
        """Earliest epoch whose error drops under ``threshold``."""
        for epoch, error in zip(self.epochs, self.errors):
            if error < threshold:
                return epoch
        return None

    def to_csv_text(self, deterministic_timing: bool = True) -> str:
        """Render as CSV; timings are zeroed unless explicitly kept."""
        lines = [",".join(TRAJECTORY_COLUMNS)]
        for i in range(len(self.epochs)):
            wall = 0.0 if deterministic_timing else self.wall_ms[i]
            lines.append(",".join([
                str(self.epochs[i]),
                repr(self.errors[i]),
                repr(self.grad_norms[i]),
                repr(self.lambda_mins[i]),
                repr(self.step_norms[i]),
                repr(wall),
            ]))
        return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    """Everything a finished run exposes to callers and artifacts."""

    config: OptimizerConfig
    theta_final: np.ndarray
    trajectory: TrajectoryLog
    converged: bool
    stop_reason: str
    snapshots: List[Tuple[int, np.ndarray]]

    @property
    def diverged(self) -> bool:
        return self.stop_reason == "diverged"

    @property
    def final_error(self) -> float:
        return (self.trajectory.errors[-1] if len(self.trajectory)
                else float("nan"))

    @property
    def final_grad_norm(self) -> float:
        return (self.trajectory.grad_norms[-1]
                if len(self.trajectory) else float("nan"))

    @property
    def final_lambda_min(self) -> float:
        return (self.trajectory.lambda_mins[-1]
                if len(self.trajectory) else float("nan"))


def lambda_min_estimate(obj: Objective, theta: np.ndarray,
                        k: int = LAMBDA_MIN_KRYLOV_K) -> float:
    """Smallest Hessian eigenvalue: exact via the dense factorization when
    affordable, otherwise the lowest Ritz value of a Krylov subspace grown
    from the gradient (shifting the operator would span the same subspace,
    so the raw Hessian is used directly)."""
    if obj.has_dense_hessian:
        dec = sym_eig(obj.dense_hessian(theta))
        return dec.lambda_min
    g = obj.grad(theta)
    if float(np.linalg.norm(g)) == 0.0:
        g = np.ones(obj.dim) / np.sqrt(obj.dim)
    basis = lanczos(lambda v: obj.hvp(theta, v), g, min(k, obj.dim))
    return sym_eig(subspace_hessian(basis)).lambda_min


def _clip(vector: np.ndarray, threshold: Optional[float]) -> np.ndarray:
    if threshold is None:
        return vector
    norm = float(np.linalg.norm(vector))
    if norm > threshold:
        return vector * (threshold / norm)
    return vector


def gd_step(obj: Objective, theta: np.ndarray, lr: float,
            clip_threshold: Optional[float] = None) -> np.ndarray:
    """Plain descent step, optionally rescaled to ``clip_threshold``."""
    g = obj.grad(theta)
    if not np.all(np.isfinite(g)):
        raise DivergedError("non-finite gradient")
    return theta + _clip(-lr * g, clip_threshold)


def msgd_step(obj: Objective, theta: np.ndarray, velocity: np.ndarray,
              lr: float, momentum: float,
              clip_threshold: Optional[float] = None):
    """Classical momentum update on ``obj``'s (possibly minibatch) gradient."""
    g = obj.grad(theta)
    if not np.all(np.isfinite(g)):
        raise DivergedError("non-finite gradient")
    velocity = momentum * velocity - lr * _clip(g, clip_threshold)
    return theta + velocity, velocity


def msgd_epoch(obj: Objective, theta: np.ndarray, velocity: np.ndarray,
               cfg: OptimizerConfig, epoch: int):
    """One pass over the data in a freshly shuffled minibatch order.

    The shuffle is seeded from (run seed, epoch) so an epoch's batch
    sequence never depends on how earlier epochs went.  Objectives without
    sample structure fall back to one full-gradient momentum step.
    """
    if getattr(obj, "data", None) is None or cfg.minibatch_size is None:
        return msgd_step(obj, theta, velocity, cfg.learning_rate,
                         cfg.momentum, cfg.clip_threshold)
    count = obj.data.size
    order = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, epoch))).permutation(count)
    for start in range(0, count, cfg.minibatch_size):
        batch = obj.restricted(order[start:start + cfg.minibatch_size])
        theta, velocity = msgd_step(batch, theta, velocity, cfg.learning_rate,
                                    cfg.momentum, cfg.clip_threshold)
    return theta, velocity


def _admissible(shifted: np.ndarray, floor: float,
                allow_indefinite: bool) -> bool:
    if allow_indefinite:
        return float(np.abs(shifted).min()) > floor
    return float(shifted.min()) > floor


def _fallback_alpha(lam_eff: np.ndarray, grid, floor: float,
                    allow_indefinite: bool) -> float:
    # No grid entry kept the system solvable: shift just past the most
    # negative effective eigenvalue, then past the floor if even that
    # leaves the spectrum degenerate.
    lmin = float(lam_eff.min())
    alpha = abs(lmin) * (1.0 + 1e-3) + float(min(grid))
    if not _admissible(lam_eff + alpha, floor, allow_indefinite):
        alpha = 2.0 * floor - lmin + float(min(grid))
    return alpha


def _pick_damping(obj, theta, lam_eff, coords, lift, cfg, floor):
    """Grid search the damping by true objective value.

    ``lift`` maps eigenbasis coordinates back to parameter space; the
    winning candidate is the admissible one with the lowest finite value,
    exact ties going to the smaller damping.
    """
    best = None
    for alpha in cfg.damping_grid:
        shifted = lam_eff + alpha
        if not _admissible(shifted, floor, cfg.allow_indefinite):
            continue
        step = lift(-(coords / shifted))
        value = obj.eval(theta + step)
        if not np.isfinite(value):
            continue
        if (best is None or value < best[0]
                or (value == best[0] and alpha < best[1])):
            best = (value, alpha, step)
    if best is None:
        alpha = _fallback_alpha(lam_eff, cfg.damping_grid, floor,
                                cfg.allow_indefinite)
        step = lift(-(coords / (lam_eff + alpha)))
        value = obj.eval(theta + step)
        if not np.isfinite(value):
            raise DivergedError("every damping candidate is non-finite")
        best = (value, alpha, step)
    return best


def dense_curvature_step(obj: Objective, theta: np.ndarray,
                         cfg: OptimizerConfig, use_abs: bool):
    """Damped Newton (or its spectrum-rectified variant) with a dense
    eigendecomposition; returns the new point and the chosen damping."""
    dec = sym_eig(obj.dense_hessian(theta))
    lam_eff = np.abs(dec.eigenvalues) if use_abs else dec.eigenvalues
    coords = dec.eigenvectors.T @ obj.grad(theta)
    _, alpha, step = _pick_damping(
        obj, theta, lam_eff, coords, lambda c: dec.eigenvectors @ c, cfg,
        solve_floor(dec.eigenvalues))
    return theta + step, alpha


def damped_newton_step(obj: Objective, theta: np.ndarray,
                       cfg: OptimizerConfig):
    return dense_curvature_step(obj, theta, cfg, use_abs=False)


def sfn_exact_step(obj: Objective, theta: np.ndarray, cfg: OptimizerConfig):
    return dense_curvature_step(obj, theta, cfg, use_abs=True)


def krylov_curvature_step(obj: Objective, theta: np.ndarray,
                          cfg: OptimizerConfig, use_abs: bool,
                          prev_step: Optional[np.ndarray]):
    """One outer step of the subspace method.

    A Krylov basis is grown from the current gradient (offering the
    previous update as the final basis direction), the Hessian is
    compressed onto it once, and ``inner_steps`` damped solves reuse that
    frozen compression against freshly projected gradients.  Returns the
    new point, the last accepted update direction, and the subspace
    spectrum's smallest Ritz value.
    """
    g = obj.grad(theta)
    basis = lanczos(lambda v: obj.hvp(theta, v), g,
                    min(cfg.krylov_k, obj.dim), prev_step=prev_step)
    dec = sym_eig(subspace_hessian(basis))
    lam_eff = np.abs(dec.eigenvalues) if use_abs else dec.eigenvalues
    floor = solve_floor(dec.eigenvalues)
    last_step = prev_step
    for inner in range(cfg.inner_steps):
        if inner > 0:
            g = obj.grad(theta)
            if float(np.linalg.norm(g)) < cfg.grad_tol:
                break
        coords = dec.eigenvectors.T @ basis.project(g)
        _, _, step = _pick_damping(
            obj, theta, lam_eff, coords,
            lambda c: basis.lift(dec.eigenvectors @ c), cfg, floor)
        theta = theta + step
        last_step = step
    return theta, last_step, dec.lambda_min


def sfn_krylov_step(obj: Objective, theta: np.ndarray,
                    prev_step: Optional[np.ndarray], cfg: OptimizerConfig):
    new_theta, new_prev, _ = krylov_curvature_step(obj, theta, cfg,
                                                   use_abs=True,
                                                   prev_step=prev_step)
    return new_theta, new_prev


def run(obj: Objective, theta0: np.ndarray, cfg: OptimizerConfig,
        snapshot_cap: int = SNAPSHOT_EPOCH_CAP) -> RunResult:
    """Drive ``cfg.method`` from ``theta0`` until the gradient norm falls
    under ``grad_tol``, the epoch budget runs out, or the iterate goes
    non-finite (stop reasons "grad_tol", "max_epochs", "diverged")."""
    theta = as_vector(theta0).copy()
    if theta.shape[0] != obj.dim:
        raise ValueError(f"theta0 has {theta.shape[0]} entries, "
                         f"expected {obj.dim}")
    if cfg.method == "sfn_exact" and not obj.has_dense_hessian:
        raise ValueError(
            "sfn_exact needs a dense Hessian; use sfn_krylov at this size")

    log = TrajectoryLog()
    snapshots = [(0, theta.copy())]
    velocity = np.zeros_like(theta)
    prev_step = None
    converged = False
    stop_reason = "max_epochs"

    grad_norm = float(np.linalg.norm(obj.grad(theta)))
    for epoch in range(1, cfg.max_epochs + 1):
        if grad_norm < cfg.grad_tol:
            converged, stop_reason = True, "grad_tol"
            break
        before = theta
        started = time.perf_counter()
        try:
            if cfg.method == "gd":
                theta = gd_step(obj, theta, cfg.learning_rate,
                                cfg.clip_threshold)
            elif cfg.method == "msgd":
                theta, velocity = msgd_epoch(obj, theta, velocity, cfg, epoch)
            elif cfg.method == "damped_newton":
                if obj.has_dense_hessian:
                    theta, _ = damped_newton_step(obj, theta, cfg)
                else:
                    theta, prev_step, _ = krylov_curvature_step(
                        obj, theta, cfg, use_abs=False, prev_step=prev_step)
            elif cfg.method == "sfn_exact":
                theta, _ = sfn_exact_step(obj, theta, cfg)
            else:
                theta, prev_step = sfn_krylov_step(obj, theta, prev_step, cfg)
        except DivergedError:
            stop_reason = "diverged"
            theta = before
            break
        wall = (time.perf_counter() - started) * 1e3

        error = obj.eval(theta)
        grad_norm = float(np.linalg.norm(obj.grad(theta)))
        if not (np.isfinite(error) and np.isfinite(grad_norm)
                and np.all(np.isfinite(theta))):
            # The log only ever holds finite records; roll back to the
            # last healthy iterate and stop.
            stop_reason = "diverged"
            theta = before
            break
        # Curvature is reported at the logged iterate, not the one the
        # step was computed from.
        if cfg.track_lambda_min:
            lam_min = lambda_min_estimate(obj, theta)
        else:
            lam_min = float("nan")
        log.append(epoch, error, grad_norm, lam_min,
                   float(np.linalg.norm(theta - before)), wall)
        if epoch <= snapshot_cap:
            snapshots.append((epoch, theta.copy()))
    else:
        if grad_norm < cfg.grad_tol:
            converged, stop_reason = True, "grad_tol"

    return RunResult(config=cfg, theta_final=theta, trajectory=log,
                     converged=converged, stop_reason=stop_reason,
                     snapshots=snapshots)
