"""Objective-function contract and built-in analytic test surfaces.

An :class:`Objective` is anything that can be minimized by the optimizers:
a scalar value, a gradient, and a Hessian-vector product over a flat
parameter vector.  Small objectives additionally expose a dense Hessian,
assembled from hvp calls on basis vectors unless an analytic form exists.

The built-in surfaces are the standard two-dimensional saddle structures
(classical saddle 5x^2 - y^2, monkey saddle x^3 - 3xy^2, and the circular
"gutter" of minima (x^2 + y^2 - 1)^2) plus random Gaussian quadratics whose
Hessian is drawn from the Gaussian Orthogonal Ensemble, scaled so the
spectrum support is approximately [-2, 2].
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import DenseSymmetric, as_vector

# Beyond this parameter count, assembling an n x n Hessian from n hvp calls
# stops being a desk-scale operation; callers must use Krylov methods.
DENSE_HESSIAN_CAP = 2000

# Below this gradient scale, finite-difference checks switch from relative
# to absolute error.
ZERO_GRADIENT_SCALE = 1e-8


class Objective(ABC):
    """Scalar objective over a flat parameter vector.

    Implementations must be deterministic functions of theta (and of a fixed
    data subset where one applies), with no mutable internal state, so that
    instances can be shared freely across threads.
    """

    @property
    @abstractmethod
    def dim(self) -> int:
        """Number of parameters."""

    @abstractmethod
    def eval(self, theta) -> float:
        """Objective value at theta."""

    @abstractmethod
    def grad(self, theta) -> np.ndarray:
        """Gradient at theta."""

    @abstractmethod
    def hvp(self, theta, v) -> np.ndarray:
        """Hessian-vector product at theta applied to v."""

    @property
    def has_dense_hessian(self) -> bool:
        return self.dim <= DENSE_HESSIAN_CAP

    def dense_hessian(self, theta) -> DenseSymmetric:
        """Full Hessian, assembled column-by-column from hvp calls."""
        if not self.has_dense_hessian:
            raise ValueError(
                f"dense Hessian unavailable for dim={self.dim} "
                f"(cap {DENSE_HESSIAN_CAP}); use Krylov methods"
            )
        theta = as_vector(theta)
        n = self.dim
        h = np.empty((n, n))
        basis = np.eye(n)
        for j in range(n):
            h[:, j] = self.hvp(theta, basis[j])
        return DenseSymmetric(h)


@dataclass(frozen=True)
class SurfaceSpec:
    """Recipe for a built-in analytic surface."""

    kind: str
    seed: Optional[int] = None
    n: Optional[int] = None


class ClassicalSaddle(Objective):
    """f(x, y) = 5x^2 - y^2, the textbook min-max saddle at the origin."""

    @property
    def dim(self):
        return 2

    def eval(self, theta):
        x, y = as_vector(theta)
        return float(5.0 * x * x - y * y)

    def grad(self, theta):
        x, y = as_vector(theta)
        return np.array([10.0 * x, -2.0 * y])

    def hvp(self, theta, v):
        v = as_vector(v)
        return np.array([10.0 * v[0], -2.0 * v[1]])

    def dense_hessian(self, theta):
        return DenseSymmetric(np.diag([10.0, -2.0]))


class MonkeySaddle(Objective):
    """f(x, y) = x^3 - 3xy^2, degenerate at the origin."""

    @property
    def dim(self):
        return 2

    def eval(self, theta):
        x, y = as_vector(theta)
        return float(x ** 3 - 3.0 * x * y * y)

    def grad(self, theta):
        x, y = as_vector(theta)
        return np.array([3.0 * x * x - 3.0 * y * y, -6.0 * x * y])

    def hvp(self, theta, v):
        return self.dense_hessian(theta).matrix @ as_vector(v)

    def dense_hessian(self, theta):
        x, y = as_vector(theta)
        return DenseSymmetric(np.array([[6.0 * x, -6.0 * y],
                                        [-6.0 * y, -6.0 * x]]))


class Gutter(Objective):
    """f(x, y) = (x^2 + y^2 - 1)^2: a full circle of minima.

    Every point of the unit circle is a critical point with a singular
    Hessian, the "bottom of a wine bottle" shape.
    """

    @property
    def dim(self):
        return 2

    def eval(self, theta):
        x, y = as_vector(theta)
        return float((x * x + y * y - 1.0) ** 2)

    def grad(self, theta):
        x, y = as_vector(theta)
        r = x * x + y * y - 1.0
        return np.array([4.0 * x * r, 4.0 * y * r])

    def hvp(self, theta, v):
        return self.dense_hessian(theta).matrix @ as_vector(v)

    def dense_hessian(self, theta):
        x, y = as_vector(theta)
        r = x * x + y * y - 1.0
        return DenseSymmetric(np.array([
            [4.0 * r + 8.0 * x * x, 8.0 * x * y],
            [8.0 * x * y, 4.0 * r + 8.0 * y * y],
        ]))


def goe_matrix(n: int, seed: int) -> np.ndarray:
    """Random symmetric matrix from the Gaussian Orthogonal Ensemble.

    Off-diagonal entries have variance 1/n and diagonal entries 2/n, which
    puts the semicircular spectral support at approximately [-2, 2].
    """
    rng = np.random.default_rng(seed)
    m = np.zeros((n, n))
    upper = np.triu_indices(n, k=1)
    m[upper] = rng.normal(0.0, 1.0 / math.sqrt(n), size=upper[0].shape[0])
    m = m + m.T
    np.fill_diagonal(m, rng.normal(0.0, math.sqrt(2.0 / n), size=n))
    return m


class GaussianQuadratic(Objective):
    """f(theta) = 1/2 theta^T M theta with a GOE-drawn constant Hessian M."""

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ValueError("n must be >= 1")
        self._m = goe_matrix(n, seed)
        self._m.flags.writeable = False

    @property
    def dim(self):
        return self._m.shape[0]

    @property
    def has_dense_hessian(self):
        return True

    def eval(self, theta):
        theta = as_vector(theta)
        return float(0.5 * theta @ self._m @ theta)

    def grad(self, theta):
        return self._m @ as_vector(theta)

    def hvp(self, theta, v):
        return self._m @ as_vector(v)

    def dense_hessian(self, theta=None):
        return DenseSymmetric(self._m)


SURFACE_KINDS = ("classical_saddle", "monkey_saddle", "gutter",
                 "gaussian_quadratic")


def make_surface(spec: SurfaceSpec) -> Objective:
    """Instantiate a built-in surface from its spec."""
    if spec.kind == "classical_saddle":
        return ClassicalSaddle()
    if spec.kind == "monkey_saddle":
        return MonkeySaddle()
    if spec.kind == "gutter":
        return Gutter()
    if spec.kind == "gaussian_quadratic":
        if spec.n is None or spec.seed is None:
            raise ValueError("gaussian_quadratic needs both n and seed")
        return GaussianQuadratic(spec.n, spec.seed)
    raise ValueError(f"unknown surface kind {spec.kind!r}; "
                     f"expected one of {SURFACE_KINDS}")


@dataclass(frozen=True)
class GradientCheckReport:
    """Outcome of comparing an analytic gradient to central differences.

    ``error`` is relative to the larger of the two gradient magnitudes; when
    both are below ``ZERO_GRADIENT_SCALE`` the comparison degenerates and
    ``error`` is the raw absolute difference (``absolute_mode`` is set).
    """

    max_abs_diff: float
    error: float
    scale: float
    absolute_mode: bool


def check_gradient(obj: Objective, theta, h: float = 1e-5) -> GradientCheckReport:
    """Compare ``obj.grad`` against central differences of ``obj.eval``."""
    if h <= 0:
        raise ValueError("h must be > 0")
    theta = as_vector(theta)
    analytic = obj.grad(theta)
    numeric = np.empty_like(analytic)
    for i in range(theta.shape[0]):
        step = np.zeros_like(theta)
        step[i] = h
        numeric[i] = (obj.eval(theta + step) - obj.eval(theta - step)) / (2.0 * h)
    max_abs = float(np.max(np.abs(analytic - numeric))) if theta.size else 0.0
    scale = float(max(np.max(np.abs(analytic), initial=0.0),
                      np.max(np.abs(numeric), initial=0.0)))
    if scale < ZERO_GRADIENT_SCALE:
        return GradientCheckReport(max_abs, max_abs, scale, absolute_mode=True)
    return GradientCheckReport(max_abs, max_abs / scale, scale, absolute_mode=False)
