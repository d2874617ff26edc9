"""Dense symmetric linear algebra for small matrices.

Everything here operates on full Hessians of toy problems or on subspace
Hessians of at most a few hundred rows, so dense eigendecompositions are
the workhorse.  The module provides:

  - ``DenseSymmetric`` / ``EigenDecomposition`` value types,
  - the spectral absolute value ``abs_spectrum`` (replace every eigenvalue
    by its magnitude),
  - positive-definite shifted solves used by damped second-order steps,
  - a Lanczos process with full reorthogonalization that memoizes the
    Hessian-vector products of its basis vectors.

All values are immutable after construction and safe to share between
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class LinalgError(Exception):
    """Base class for numerical failures in this module."""


class NonFiniteInputError(LinalgError):
    """Input contained NaN or Inf."""


class EigenConvergenceError(LinalgError):
    """The eigensolver failed to converge."""


class SingularSystemError(LinalgError):
    """A shifted system had an eigenvalue at or below the solvability floor.

    Callers are expected to react by raising their damping coefficient.
    """


class ZeroInitialVectorError(LinalgError):
    """Lanczos was started from a (numerically) zero vector."""


def as_vector(x) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInputError("vector contains NaN or Inf")
    return v


@dataclass(frozen=True)
class DenseSymmetric:
    """A small dense symmetric matrix.

    The constructor symmetrizes by averaging with the transpose, because
    matrices assembled from inexact Hessian-vector products are only
    approximately symmetric.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        if m.shape[0] < 1:
            raise ValueError("matrix order must be >= 1")
        if not np.all(np.isfinite(m)):
            raise NonFiniteInputError("matrix contains NaN or Inf")
        m = 0.5 * (m + m.T)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def order(self) -> int:
        return self.matrix.shape[0]

    def quadratic_form(self, x) -> float:
        x = as_vector(x)
        return float(x @ self.matrix @ x)


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in descending order; eigenvectors as orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        self.eigenvalues.flags.writeable = False
        self.eigenvectors.flags.writeable = False

    @property
    def order(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])


def sym_eig(a: DenseSymmetric) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    try:
        vals, vecs = np.linalg.eigh(a.matrix)
    except np.linalg.LinAlgError as exc:
        res = float(np.linalg.norm(a.matrix - a.matrix.T))
        raise EigenConvergenceError(
            f"eigh failed on order-{a.order} matrix "
            f"(asymmetry residual {res:.3e}): {exc}"
        ) from exc
    order = np.argsort(vals)[::-1]
    return EigenDecomposition(np.ascontiguousarray(vals[order]),
                              np.ascontiguousarray(vecs[:, order]))


def abs_spectrum(a: DenseSymmetric) -> DenseSymmetric:
    """Replace every eigenvalue of ``a`` by its absolute value.

    The result is positive semidefinite and equals ``a`` whenever ``a``
    already is.
    """
    dec = sym_eig(a)
    v = dec.eigenvectors
    return DenseSymmetric((v * np.abs(dec.eigenvalues)) @ v.T)


def solve_floor(eigenvalues: np.ndarray) -> float:
    """Smallest shifted eigenvalue we are willing to divide by."""
    return 1e-12 * max(1.0, float(np.max(np.abs(eigenvalues))))


def shifted_solve_from_eig(dec: EigenDecomposition, shift: float, g) -> np.ndarray:
    """Apply (A + shift*I)^-1 to ``g`` given an eigendecomposition of A."""
    g = as_vector(g)
    shifted = dec.eigenvalues + shift
    if np.min(shifted) <= solve_floor(dec.eigenvalues):
        raise SingularSystemError(
            f"shifted eigenvalue {np.min(shifted):.3e} at or below floor "
            f"{solve_floor(dec.eigenvalues):.3e}; raise the damping"
        )
    v = dec.eigenvectors
    return v @ ((v.T @ g) / shifted)


def shifted_inverse_apply(a: DenseSymmetric, shift: float, g) -> np.ndarray:
    """Solve (A + shift*I) x = g through the eigendecomposition of A."""
    if shift < 0:
        raise ValueError("shift must be >= 0")
    return shifted_solve_from_eig(sym_eig(a), shift, g)


@dataclass(frozen=True)
class KrylovBasis:
    """Orthonormal Lanczos vectors with memoized Hessian products.

    ``v`` holds the basis vectors as rows, ``w[i]`` is the Hessian-vector
    product of ``v[i]`` captured during the iteration, so assembling the
    subspace Hessian afterwards costs no further Hessian work.  ``reduced``
    flags an early breakdown (the span became invariant before ``requested``
    vectors were produced).
    """

    v: np.ndarray
    w: np.ndarray
    requested: int
    reduced: bool = field(default=False)

    def __post_init__(self):
        self.v.flags.writeable = False
        self.w.flags.writeable = False

    @property
    def k(self) -> int:
        return self.v.shape[0]

    @property
    def dim(self) -> int:
        return self.v.shape[1]

    def project(self, x) -> np.ndarray:
        """Coordinates of ``x`` in the basis: V @ x."""
        return self.v @ as_vector(x)

    def lift(self, coords) -> np.ndarray:
        """Map subspace coordinates back to the full space: V^T @ coords."""
        return self.v.T @ as_vector(coords)


def _orthogonalize(w: np.ndarray, basis: np.ndarray) -> np.ndarray:
    # Two classical Gram-Schmidt passes; one is not always enough in
    # floating point, two keep the basis orthonormal to near roundoff.
    for _ in range(2):
        w = w - basis.T @ (basis @ w)
    return w


def lanczos(hvp: Callable[[np.ndarray], np.ndarray], g, k: int,
            prev_step: Optional[np.ndarray] = None) -> KrylovBasis:
    """Build ``k`` Lanczos vectors of the Hessian, seeded by ``g``.

    Full reorthogonalization replaces the plain three-term recurrence: the
    bases here are small and orthogonality is an invariant downstream code
    relies on.  When ``prev_step`` is given (and k >= 2) it is injected as
    the candidate for the final basis vector, orthonormalized against the
    vectors built so far, so the subspace always contains the previous
    search direction.

    Breakdown (candidate norm below 1e-12 * ||g||) terminates early and
    returns a smaller basis with ``reduced=True``.
    """
    g = as_vector(g)
    n = g.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= dim, got k={k}, dim={n}")
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        raise ZeroInitialVectorError("cannot start Lanczos from a zero vector")
    breakdown_tol = 1e-12 * gnorm

    vectors = np.empty((k, n))
    products = np.empty((k, n))
    vectors[0] = g / gnorm

    size = 1
    for i in range(k - 1):
        products[i] = as_vector(hvp(vectors[i]))
        if prev_step is not None and i == k - 2:
            candidate = as_vector(prev_step).copy()
        else:
            candidate = products[i].copy()
        candidate = _orthogonalize(candidate, vectors[:size])
        beta = float(np.linalg.norm(candidate))
        if beta < breakdown_tol:
            return KrylovBasis(vectors[:size].copy(), products[:size].copy(),
                               requested=k, reduced=True)
        vectors[size] = candidate / beta
        size += 1
    products[size - 1] = as_vector(hvp(vectors[size - 1]))
    return KrylovBasis(vectors[:size].copy(), products[:size].copy(),
                       requested=k, reduced=False)


def subspace_hessian(basis: KrylovBasis) -> DenseSymmetric:
    """Hessian restricted to the Krylov basis: H_ij = v_i . (H v_j).

    Uses the products memoized during the Lanczos run, so no additional
    Hessian-vector calls happen here.
    """
    return DenseSymmetric(basis.v @ basis.w.T)
