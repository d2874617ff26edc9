"""Declarative experiment configuration.

Experiments are described by a single TOML file (diffable, re-runnable)
validated against the pydantic schema below; the same models serve as the
request bodies of the HTTP service.  Every seed an experiment consumes is
either written explicitly in the file or derived deterministically from
the master seed, so a config plus its master seed fixes every artifact
byte.

``resolve`` expands defaults and fills every derived seed, producing the
fully explicit config that gets embedded in output files for provenance.
"""

from __future__ import annotations

import json
import zlib
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .mlp import LOSSES
from .objectives import SURFACE_KINDS
from .optim import DEFAULT_DAMPING_GRID, METHODS, OptimizerConfig

EXPERIMENT_KINDS = ("optimize", "compare", "critical_points", "spectrum")


class ConfigError(Exception):
    """A config file failed to parse or validate."""


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """Deterministic child seed for the stream ``label``/``index``."""
    ss = np.random.SeedSequence(
        (int(master), zlib.crc32(label.encode("ascii")), int(index)))
    return int(ss.generate_state(1, np.uint32)[0])


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Optimization on the two-dimensional surfaces starts just off the saddle
# unless the config states otherwise.
DEFAULT_SURFACE_START = (1.0, 1e-3)


class SurfaceModel(_Model):
    kind: Literal["classical_saddle", "monkey_saddle", "gutter",
                  "gaussian_quadratic"]
    seed: Optional[int] = None
    n: Optional[int] = Field(default=None, ge=1)
    start: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_kind_params(self):
        if self.kind == "gaussian_quadratic":
            if self.n is None:
                raise ValueError("gaussian_quadratic requires n")
            if self.start is not None and len(self.start) != self.n:
                raise ValueError("start length must equal n")
        else:
            if self.n is not None:
                raise ValueError(f"{self.kind} takes no dimension n")
            if self.start is not None and len(self.start) != 2:
                raise ValueError(f"{self.kind} start must have 2 entries")
        return self


class BlobsDatasetModel(_Model):
    kind: Literal["blobs"] = "blobs"
    classes: int = Field(default=2, ge=1)
    per_class: int = Field(default=4, ge=1)
    dim: int = Field(default=2, ge=1)
    separation: float = 4.0
    seed: Optional[int] = None


class IdxDatasetModel(_Model):
    kind: Literal["idx"]
    images: str
    labels: str
    downsample: Optional[Tuple[int, int]] = None


DatasetModel = Union[BlobsDatasetModel, IdxDatasetModel]


class MlpModel(_Model):
    input_dim: int = Field(ge=1)
    hidden_units: Union[int, List[int]]
    output_dim: int = Field(ge=1)
    loss: Literal["mse", "cross_entropy"] = "mse"
    init_range: float = Field(default=0.1, gt=0)
    init_seed: Optional[int] = None
    dataset: DatasetModel = Field(discriminator="kind")

    @model_validator(mode="after")
    def _check_hidden(self):
        sizes = self.hidden_sizes()
        if len(sizes) == 0:
            raise ValueError("hidden_units must name at least one size")
        if any(h < 1 for h in sizes):
            raise ValueError("hidden_units must be positive")
        if len(set(sizes)) != len(sizes):
            raise ValueError("hidden_units sizes must be distinct")
        return self

    def hidden_sizes(self) -> List[int]:
        if isinstance(self.hidden_units, int):
            return [self.hidden_units]
        return list(self.hidden_units)


class ObjectiveModel(_Model):
    surface: Optional[SurfaceModel] = None
    mlp: Optional[MlpModel] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.surface is None) == (self.mlp is None):
            raise ValueError("objective needs exactly one of surface or mlp")
        return self


class OptimizerModel(_Model):
    """Mirror of the runtime optimizer knobs, plus an artifact label."""

    name: Optional[str] = None
    method: Literal["gd", "msgd", "damped_newton", "sfn_exact", "sfn_krylov"]
    learning_rate: float = 0.01
    momentum: float = 0.0
    minibatch_size: Optional[int] = Field(default=None, ge=1)
    clip_threshold: Optional[float] = Field(default=None, gt=0)
    max_epochs: int = Field(default=100, ge=0)
    grad_tol: float = Field(default=1e-10, gt=0)
    damping_grid: List[float] = Field(
        default_factory=lambda: list(DEFAULT_DAMPING_GRID))
    krylov_k: int = Field(default=32, ge=1)
    inner_steps: int = Field(default=1, ge=1)
    outer_steps: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = None
    allow_indefinite: bool = False
    track_lambda_min: bool = True

    def to_runtime(self) -> OptimizerConfig:
        return OptimizerConfig(
            method=self.method, learning_rate=self.learning_rate,
            momentum=self.momentum, minibatch_size=self.minibatch_size,
            clip_threshold=self.clip_threshold, max_epochs=self.max_epochs,
            grad_tol=self.grad_tol, damping_grid=tuple(self.damping_grid),
            krylov_k=self.krylov_k, inner_steps=self.inner_steps,
            outer_steps=self.outer_steps,
            seed=0 if self.seed is None else self.seed,
            allow_indefinite=self.allow_indefinite,
            track_lambda_min=self.track_lambda_min)

    @model_validator(mode="after")
    def _check_runtime(self):
        try:
            self.to_runtime()
        except ValueError as exc:
            raise ValueError(str(exc)) from exc
        return self


class SearchModel(_Model):
    """Random-search space for msgd hyperparameters.

    Learning rate (and clip threshold, when given a range) are sampled
    log-uniformly; momentum uniformly; minibatch size categorically.
    """

    samples: int = Field(default=80, ge=1)
    learning_rate_range: Tuple[float, float] = (1e-4, 1.0)
    momentum_range: Tuple[float, float] = (0.0, 0.9)
    minibatch_sizes: List[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    clip_threshold_range: Optional[Tuple[float, float]] = None
    max_epochs: int = Field(default=50, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_ranges(self):
        lo, hi = self.learning_rate_range
        if not 0 < lo <= hi:
            raise ValueError("learning_rate_range must satisfy 0 < lo <= hi")
        lo, hi = self.momentum_range
        if not 0 <= lo <= hi < 1:
            raise ValueError("momentum_range must lie in [0, 1) with lo <= hi")
        if len(self.minibatch_sizes) == 0:
            raise ValueError("minibatch_sizes must be non-empty")
        if any(b < 1 for b in self.minibatch_sizes):
            raise ValueError("minibatch sizes must be >= 1")
        if self.clip_threshold_range is not None:
            lo, hi = self.clip_threshold_range
            if not 0 < lo <= hi:
                raise ValueError(
                    "clip_threshold_range must satisfy 0 < lo <= hi")
        return self


class CriticalPointsModel(_Model):
    n_jobs: int = Field(default=100, ge=1)
    noise_amplitudes: List[float] = Field(
        default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    grad_tol: float = Field(default=1e-8, gt=0)
    max_iters: int = Field(default=500, ge=1)
    mu0: float = Field(default=0.0, ge=0)
    warmup: Optional[OptimizerModel] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_amplitudes(self):
        if len(self.noise_amplitudes) == 0:
            raise ValueError("noise_amplitudes must be non-empty")
        if any(a < 0 for a in self.noise_amplitudes):
            raise ValueError("noise amplitudes must be >= 0")
        return self


class SpectrumModel(_Model):
    source: Literal["goe", "hessian_at_init"] = "goe"
    n: int = Field(default=500, ge=1)
    seeds: Optional[List[int]] = None
    n_seeds: int = Field(default=10, ge=1)
    bins: int = Field(default=50, ge=1)


class ExperimentConfig(_Model):
    kind: Literal["optimize", "compare", "critical_points", "spectrum"]
    seed: int = 0
    out: Optional[str] = None
    jobs: int = Field(default=1, ge=1)
    objective: Optional[ObjectiveModel] = None
    optimizers: List[OptimizerModel] = Field(default_factory=list)
    search: Optional[SearchModel] = None
    critical_points: Optional[CriticalPointsModel] = None
    spectrum: Optional[SpectrumModel] = None

    @model_validator(mode="after")
    def _check_kind_sections(self):
        if self.kind == "optimize":
            if self.objective is None:
                raise ValueError("optimize requires an objective")
            if len(self.optimizers) != 1:
                raise ValueError("optimize requires exactly one optimizer")
        elif self.kind == "compare":
            if self.objective is None:
                raise ValueError("compare requires an objective")
            if len(self.optimizers) == 0 and self.search is None:
                raise ValueError(
                    "compare requires optimizers (or a search section)")
        elif self.kind == "critical_points":
            if self.objective is None:
                raise ValueError("critical_points requires an objective")
        else:
            if self.spectrum is None:
                raise ValueError("spectrum requires a [spectrum] section")
            if (self.spectrum.source == "hessian_at_init"
                    and self.objective is None):
                raise ValueError("hessian_at_init spectrum needs an objective")
        if self.kind != "compare":
            if self.search is not None:
                raise ValueError("search is only meaningful under compare")
            if (self.objective is not None
                    and self.objective.mlp is not None
                    and len(self.objective.mlp.hidden_sizes()) != 1):
                raise ValueError(
                    f"{self.kind} takes a single hidden size, not a sweep")
        return self


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Expand defaults and derive every unset seed from the master seed.

    The result is fully explicit: serializing it and re-running reproduces
    the original run byte for byte.
    """
    out = cfg.model_copy(deep=True)
    master = out.seed
    if out.out is None:
        out.out = f"results/{out.kind}"
    if out.objective is not None:
        if out.objective.surface is not None:
            surface = out.objective.surface
            if surface.kind == "gaussian_quadratic":
                if surface.seed is None:
                    surface.seed = derive_seed(master, "surface")
                if surface.start is None:
                    rng = np.random.default_rng(derive_seed(master, "start"))
                    surface.start = [float(v) for v in
                                     rng.uniform(-1.0, 1.0, surface.n)]
            elif surface.start is None:
                surface.start = list(DEFAULT_SURFACE_START)
        if out.objective.mlp is not None:
            mlp = out.objective.mlp
            if mlp.init_seed is None:
                mlp.init_seed = derive_seed(master, "init")
            if mlp.dataset.kind == "blobs" and mlp.dataset.seed is None:
                mlp.dataset.seed = derive_seed(master, "dataset")
    names = []
    for i, opt in enumerate(out.optimizers):
        if opt.seed is None:
            opt.seed = derive_seed(master, "optimizer", i)
        if opt.name is None:
            opt.name = opt.method
        if opt.name in names:
            raise ConfigError(f"duplicate optimizer name {opt.name!r}; "
                              f"set distinct names")
        names.append(opt.name)
    if out.search is not None and out.search.seed is None:
        out.search.seed = derive_seed(master, "search")
    if out.critical_points is None and out.kind == "critical_points":
        out.critical_points = CriticalPointsModel()
    if out.critical_points is not None:
        if out.critical_points.seed is None:
            out.critical_points.seed = derive_seed(master, "landscape")
        if out.critical_points.warmup is None:
            # Short momentum-SGD run whose snapshots seed the survey's
            # trajectory arm.
            out.critical_points.warmup = OptimizerModel(
                method="msgd", learning_rate=0.05, momentum=0.9,
                minibatch_size=2, max_epochs=20, track_lambda_min=False)
        warmup = out.critical_points.warmup
        if warmup.seed is None:
            warmup.seed = derive_seed(master, "warmup")
        if warmup.name is None:
            warmup.name = warmup.method
    if out.spectrum is not None and out.spectrum.seeds is None:
        out.spectrum.seeds = [derive_seed(master, "spectrum", i)
                              for i in range(out.spectrum.n_seeds)]
    return out


def canonical_json(model: BaseModel) -> str:
    """Stable single-line JSON used for provenance headers."""
    return json.dumps(model.model_dump(mode="json"), sort_keys=True,
                      separators=(",", ":"))


def load_toml(path) -> dict:
    """Read a TOML file into a plain dict, without validating it."""
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    return parse_config(load_toml(path))


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except Exception as exc:
        # pydantic's message already names the offending field path.
        raise ConfigError(str(exc)) from exc
