"""Single-hidden-layer tanh networks as optimizer objectives.

The networks are deliberately tiny: one tanh hidden layer, a linear output
with mean squared error or a softmax output with cross-entropy, evaluated
full-batch.  Gradients come from reverse-mode accumulation written out by
hand; Hessian-vector products use forward-over-reverse directional
differentiation, which stays accurate near critical points where finite
differences of vanishing gradients would not.

Also provides the datasets these networks train on at desk scale: seeded
Gaussian blob classification sets, big-endian IDX image/label files, and
area-weighted image downsampling.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .linalg import as_vector
from .objectives import DENSE_HESSIAN_CAP, Objective

LOSSES = ("mse", "cross_entropy")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Standard deviation of the Gaussian clusters produced by synth_blobs;
# small enough that modest separations give linearly separable sets.
BLOB_CLUSTER_STD = 0.2


class IdxFormatError(Exception):
    """Base class for IDX parsing failures."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a single-hidden-layer tanh network.

    ``loss`` selects the output layer: "mse" pairs a linear output with the
    half squared error, "cross_entropy" a softmax output with the negative
    log-likelihood.  ``init_range`` is the half-width of the uniform
    initialization cube.
    """

    input_dim: int
    hidden_units: int
    output_dim: int
    loss: str = "mse"
    init_range: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.hidden_units, self.output_dim) < 1:
            raise ValueError("all layer sizes must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.init_range <= 0:
            raise ValueError("init_range must be > 0")

    @property
    def param_count(self) -> int:
        return ((self.input_dim + 1) * self.hidden_units
                + (self.hidden_units + 1) * self.output_dim)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer labels or regression targets.

    ``y`` is a 1-D int array of class labels or a 2-D float array of
    regression targets.  ``image_shape`` records the (rows, cols) geometry
    when the features are flattened images, which downsampling requires.
    """

    x: np.ndarray
    y: np.ndarray
    name: str = ""
    seed: int = 0
    image_shape: Optional[tuple] = None
    n_classes: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("inputs must be a 2-D (samples, features) array")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs contain NaN or Inf")
        if self.is_classification:
            y = np.asarray(self.y, dtype=np.int64)
            if y.ndim != 1:
                raise ValueError("label array must be 1-D")
            n_classes = self.n_classes
            if n_classes is None:
                n_classes = int(y.max()) + 1 if y.size else 0
            if y.size and (y.min() < 0 or y.max() >= n_classes):
                raise ValueError("labels out of range")
            object.__setattr__(self, "n_classes", n_classes)
        else:
            y = np.asarray(self.y, dtype=np.float64)
            if y.ndim != 2:
                raise ValueError("regression targets must be 2-D")
            if not np.all(np.isfinite(y)):
                raise ValueError("targets contain NaN or Inf")
        if y.shape[0] != x.shape[0]:
            raise ValueError(
                f"{x.shape[0]} inputs but {y.shape[0]} targets")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.image_shape is not None:
            r, c = self.image_shape
            if r * c != x.shape[1]:
                raise ValueError("image_shape inconsistent with feature count")
            object.__setattr__(self, "image_shape", (int(r), int(c)))

    @property
    def is_classification(self) -> bool:
        return np.asarray(self.y).ndim == 1

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, x=self.x[indices], y=self.y[indices])


def synth_blobs(classes: int, per_class: int, dim: int, separation: float,
                seed: int) -> Dataset:
    """Seeded Gaussian class clusters.

    Class means sit on coordinate axes at distance ``separation / 2`` from
    the origin, alternating sign, so two classes end up exactly
    ``separation`` apart.  Cluster noise is isotropic with standard
    deviation ``BLOB_CLUSTER_STD``.
    """
    if min(classes, per_class, dim) < 1:
        raise ValueError("classes, per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    for c in range(classes):
        axis = (c // 2) % dim
        sign = 1.0 if c % 2 == 0 else -1.0
        means[c, axis] = sign * separation / 2.0
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.normal(0.0, BLOB_CLUSTER_STD,
                                   size=(labels.shape[0], dim))
    return Dataset(x=x, y=labels, name=f"blobs{classes}x{per_class}d{dim}",
                   seed=seed, n_classes=classes)


def _read_exact(fh, nbytes: int, path: str, what: str) -> bytes:
    data = fh.read(nbytes)
    if len(data) < nbytes:
        raise TruncatedFileError(
            f"{path}: expected {nbytes} bytes for {what}, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an image/label pair of big-endian IDX files.

    Pixels are scaled from unsigned bytes to [0, 1].  The two files must
    agree on the sample count.
    """
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(
            ">iiii", _read_exact(fh, 16, images_path, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(
                f"{images_path}: magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        payload = _read_exact(fh, count * rows * cols, images_path, "pixels")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(
            ">ii", _read_exact(fh, 8, labels_path, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(
                f"{labels_path}: magic 0x{magic:08x}, "
                f"expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(
            _read_exact(fh, label_count, labels_path, "labels"),
            dtype=np.uint8).astype(np.int64)
    if count != label_count:
        raise CountMismatchError(
            f"{count} images but {label_count} labels")
    return Dataset(x=pixels.reshape(count, rows * cols), y=labels,
                   name="idx", image_shape=(rows, cols))


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    # Row i holds the fractional overlap of each input cell with the
    # output band [i*n_in/n_out, (i+1)*n_in/n_out), normalized to sum 1.
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for r in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            w[i, r] = min(hi, r + 1.0) - max(lo, float(r))
    return w / scale


def downsample(data: Dataset, rows: int, cols: int) -> Dataset:
    """Area-weighted average resampling of an image dataset.

    Each output pixel averages the input pixels it covers, weighted by
    fractional overlap, so constant images stay constant exactly.
    """
    if data.image_shape is None:
        raise ValueError("dataset has no image geometry to downsample")
    if min(rows, cols) < 1:
        raise ValueError("target geometry must be positive")
    r_in, c_in = data.image_shape
    wr = _overlap_weights(r_in, rows)
    wc = _overlap_weights(c_in, cols)
    images = data.x.reshape(data.size, r_in, c_in)
    out = np.einsum("or,nrc,pc->nop", wr, images, wc)
    return replace(data, x=out.reshape(data.size, rows * cols),
                   image_shape=(rows, cols))


def init_theta(spec: MlpSpec, seed: Optional[int] = None) -> np.ndarray:
    """Uniform initialization in [-init_range, init_range]."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    return rng.uniform(-spec.init_range, spec.init_range, spec.param_count)


class MlpObjective(Objective):
    """Mean loss of a single-hidden-layer tanh network over a dataset.

    Full-batch and exactly deterministic; minibatch training uses
    :meth:`restricted` views over index subsets.
    """

    def __init__(self, spec: MlpSpec, data: Dataset):
        if data.feature_dim != spec.input_dim:
            raise ValueError(
                f"dataset features ({data.feature_dim}) do not match "
                f"input_dim ({spec.input_dim})")
        if data.is_classification:
            if data.n_classes > spec.output_dim:
                raise ValueError(
                    f"{data.n_classes} classes need output_dim >= "
                    f"{data.n_classes}, got {spec.output_dim}")
        else:
            if spec.loss == "cross_entropy":
                raise ValueError("cross_entropy needs integer class labels")
            if data.y.shape[1] != spec.output_dim:
                raise ValueError(
                    f"target dim ({data.y.shape[1]}) does not match "
                    f"output_dim ({spec.output_dim})")
        self.spec = spec
        self.data = data
        if spec.loss == "mse" and data.is_classification:
            targets = np.zeros((data.size, spec.output_dim))
            targets[np.arange(data.size), data.y] = 1.0
            self._targets = targets
        elif spec.loss == "mse":
            self._targets = data.y
        else:
            self._targets = None

    @property
    def dim(self):
        return self.spec.param_count

    def restricted(self, indices) -> "MlpObjective":
        """Objective over a subset of the samples (for minibatch gradients)."""
        return MlpObjective(self.spec, self.data.subset(indices))

    def _unpack(self, theta):
        s = self.spec
        theta = as_vector(theta)
        if theta.shape[0] != s.param_count:
            raise ValueError(
                f"theta has {theta.shape[0]} entries, expected {s.param_count}")
        i = 0
        w1 = theta[i:i + s.hidden_units * s.input_dim].reshape(
            s.hidden_units, s.input_dim)
        i += w1.size
        b1 = theta[i:i + s.hidden_units]
        i += b1.size
        w2 = theta[i:i + s.output_dim * s.hidden_units].reshape(
            s.output_dim, s.hidden_units)
        i += w2.size
        b2 = theta[i:]
        return w1, b1, w2, b2

    @staticmethod
    def _pack(w1, b1, w2, b2):
        return np.concatenate([w1.ravel(), b1, w2.ravel(), b2])

    def _forward(self, theta):
        w1, b1, w2, b2 = self._unpack(theta)
        z = np.tanh(self.data.x @ w1.T + b1)
        u = z @ w2.T + b2
        return w1, b1, w2, b2, z, u

    def _softmax(self, u):
        p = np.exp(u - u.max(axis=1, keepdims=True))
        return p / p.sum(axis=1, keepdims=True)

    def eval(self, theta):
        _, _, _, _, _, u = self._forward(theta)
        n = self.data.size
        if self.spec.loss == "mse":
            return float(0.5 * np.sum((u - self._targets) ** 2) / n)
        lse = np.log(np.sum(np.exp(u - u.max(axis=1, keepdims=True)),
                            axis=1)) + u.max(axis=1)
        return float(np.mean(lse - u[np.arange(n), self.data.y]))

    def _output_delta(self, u):
        n = self.data.size
        if self.spec.loss == "mse":
            return (u - self._targets) / n
        p = self._softmax(u)
        delta = p.copy()
        delta[np.arange(n), self.data.y] -= 1.0
        return delta / n

    def grad(self, theta):
        w1, b1, w2, b2, z, u = self._forward(theta)
        du = self._output_delta(u)
        dz = du @ w2
        da = dz * (1.0 - z * z)
        return self._pack(da.T @ self.data.x, da.sum(axis=0),
                          du.T @ z, du.sum(axis=0))

    def hvp(self, theta, v):
        """Exact Hessian-vector product by forward-over-reverse differentiation."""
        w1, b1, w2, b2, z, u = self._forward(theta)
        rw1, rb1, rw2, rb2 = self._unpack(v)
        x = self.data.x
        n = self.data.size

        ra = x @ rw1.T + rb1
        rz = (1.0 - z * z) * ra
        ru = z @ rw2.T + rz @ w2.T + rb2

        du = self._output_delta(u)
        if self.spec.loss == "mse":
            rdu = ru / n
        else:
            p = self._softmax(u)
            rdu = p * (ru - np.sum(p * ru, axis=1, keepdims=True)) / n

        dz = du @ w2
        rdz = rdu @ w2 + du @ rw2
        da = dz * (1.0 - z * z)
        rda = rdz * (1.0 - z * z) - 2.0 * dz * z * rz

        return self._pack(rda.T @ x, rda.sum(axis=0),
                          rdu.T @ z + du.T @ rz, rdu.sum(axis=0))


def make_mlp(spec: MlpSpec, data: Dataset) -> MlpObjective:
    """Build the training objective for ``spec`` over ``data``."""
    return MlpObjective(spec, data)
