"""Gaussian random fields with covariance q (tau^2 - Laplacian)^(-alpha).

Two sampling domains are supported. ``neumann2d`` fields live on the square
[-1,1]^2 with Neumann Laplacian eigenfunctions

    phi_k(x, y) = N_k cos(k1 pi (x+1)/2) cos(k2 pi (y+1)/2),
    lambda_k = (k1 pi / 2)^2 + (k2 pi / 2)^2,   k in {0..n-1}^2,

and ``dirichlet1d`` fields live on the angle interval (-pi, pi] with

    phi_k(theta) = N_k sin(k (theta+pi)/2),
    lambda_k = (k/2)^2,   k in {1..n}.

N_k are L2 normalization constants (1/sqrt(2) per zero Neumann index, so
N_00^2 = 1/4 on the square; 1/sqrt(pi) for every sine mode). A draw is

    u = m0 + sum_k sqrt(q) (tau^2 + lambda_k)^(-alpha/2) xi_k phi_k,

evaluated at cell centers x_i = -1 + (2i+1)/n (or theta_j = -pi + (2j+1) pi/n)
by fast cosine/sine transforms.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, dctn, dst

NEUMANN2D = "neumann2d"
DIRICHLET1D = "dirichlet1d"

_BOUNDARIES = (NEUMANN2D, DIRICHLET1D)


class GeometryError(ValueError):
    """Raised when a target point lies outside a field's domain."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Parameters of the covariance q (tau^2 - Laplacian)^(-alpha).

    tau is the inverse length scale, alpha controls regularity, q the overall
    amplitude, boundary one of ``neumann2d`` / ``dirichlet1d``, grid_size a
    power of two giving the per-axis resolution of the sampling grid.
    """

    q: float
    tau: float
    alpha: float
    boundary: str
    grid_size: int

    def __post_init__(self) -> None:
        if self.q <= 0:
            raise ValueError(f"q must be positive, got {self.q}")
        if self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.boundary not in _BOUNDARIES:
            raise ValueError(f"boundary must be one of {_BOUNDARIES}, got {self.boundary!r}")
        n = self.grid_size
        if n < 2 or (n & (n - 1)) != 0:
            raise ValueError(f"grid_size must be a power of two >= 2, got {n}")
        if self.boundary == NEUMANN2D and self.tau == 0.0:
            raise ValueError("tau = 0 leaves the constant Neumann mode with infinite variance")
        d = 2 if self.boundary == NEUMANN2D else 1
        if self.alpha <= d / 2:
            warnings.warn(
                f"alpha = {self.alpha} <= d/2 = {d / 2}: covariance trace diverges "
                "as the grid is refined",
                stacklevel=2,
            )

    @property
    def dim(self) -> int:
        return 2 if self.boundary == NEUMANN2D else 1


@dataclass
class GridField:
    """A field sampled on its covariance grid.

    ``values`` holds the full field including the mean: shape (n, n) for
    neumann2d with axis 0 along x and axis 1 along y, shape (n,) for
    dirichlet1d. ``mean_offset`` records the constant mean m0 the field was
    built around.
    """

    boundary: str
    values: np.ndarray
    mean_offset: float

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.boundary == NEUMANN2D:
            if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
                raise ValueError(f"neumann2d values must be square, got {self.values.shape}")
        elif self.boundary == DIRICHLET1D:
            if self.values.ndim != 1:
                raise ValueError(f"dirichlet1d values must be 1-d, got {self.values.shape}")
        else:
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @property
    def grid_size(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "GridField":
        return GridField(self.boundary, self.values.copy(), self.mean_offset)


def grid_coordinates(boundary: str, n: int) -> np.ndarray:
    """Cell-center coordinates of the sampling grid (one axis)."""
    i = np.arange(n)
    if boundary == NEUMANN2D:
        return -1.0 + (2 * i + 1) / n
    if boundary == DIRICHLET1D:
        return -math.pi + (2 * i + 1) * math.pi / n
    raise ValueError(f"unknown boundary {boundary!r}")


def mode_eigenvalues(spec: CovarianceSpec) -> np.ndarray:
    """Laplacian eigenvalues per mode: (n, n) for neumann2d, (n,) for dirichlet1d."""
    n = spec.grid_size
    if spec.boundary == NEUMANN2D:
        k = np.arange(n)
        lam1 = (k * math.pi / 2.0) ** 2
        return lam1[:, None] + lam1[None, :]
    k = np.arange(1, n + 1)
    return (k / 2.0) ** 2


def mode_stddev(spec: CovarianceSpec) -> np.ndarray:
    """Standard deviation sqrt(q) (tau^2 + lambda_k)^(-alpha/2) of each mode weight."""
    lam = mode_eigenvalues(spec)
    return math.sqrt(spec.q) * (spec.tau**2 + lam) ** (-spec.alpha / 2.0)


def _norm_constants(boundary: str, n: int) -> np.ndarray:
    if boundary == NEUMANN2D:
        axis = np.where(np.arange(n) == 0, 1.0 / math.sqrt(2.0), 1.0)
        return axis[:, None] * axis[None, :]
    return np.full(n, 1.0 / math.sqrt(math.pi))


@functools.lru_cache(maxsize=32)
def _synthesis_scale(spec: CovarianceSpec) -> np.ndarray:
    """Per-mode factor turning white noise into packed fast-transform input."""
    n = spec.grid_size
    scale = mode_stddev(spec) * _norm_constants(spec.boundary, n)
    if spec.boundary == NEUMANN2D:
        packed = scale.copy()
        packed[1:, :] /= 2.0
        packed[:, 1:] /= 2.0
    else:
        packed = scale.copy()
        packed[:-1] /= 2.0
    packed.flags.writeable = False
    return packed


def synthesize(spec: CovarianceSpec, coefficients: np.ndarray, mean: float = 0.0) -> GridField:
    """Evaluate mean + sum_k a_k phi_k on the grid from orthonormal-basis coefficients."""
    n = spec.grid_size
    a = np.asarray(coefficients, dtype=float)
    norms = _norm_constants(spec.boundary, n)
    if spec.boundary == NEUMANN2D:
        if a.shape != (n, n):
            raise ValueError(f"expected ({n}, {n}) coefficients, got {a.shape}")
        packed = a * norms
        packed[1:, :] /= 2.0
        packed[:, 1:] /= 2.0
        values = dctn(packed, type=3) + mean
    else:
        if a.shape != (n,):
            raise ValueError(f"expected ({n},) coefficients, got {a.shape}")
        packed = a * norms
        packed[:-1] /= 2.0
        values = dst(packed, type=3) + mean
    return GridField(spec.boundary, values, mean)


def transform_coefficients(boundary: str, fluctuation: np.ndarray) -> np.ndarray:
    """Orthonormal-basis coefficients a_k of a mean-removed grid field.

    Inverse of :func:`synthesize` up to rounding; the input must already have
    its mean offset subtracted.
    """
    v = np.asarray(fluctuation, dtype=float)
    n = v.shape[0]
    norms = _norm_constants(boundary, n)
    if boundary == NEUMANN2D:
        if v.ndim != 2 or v.shape != (n, n):
            raise ValueError(f"neumann2d fluctuation must be square, got {v.shape}")
        y = dctn(v, type=2)
        div = np.where(np.arange(n) == 0, 2.0 * n, float(n))
        c = y / (div[:, None] * div[None, :])
        return c / norms
    if boundary == DIRICHLET1D:
        if v.ndim != 1:
            raise ValueError(f"dirichlet1d fluctuation must be 1-d, got {v.shape}")
        y = dst(v, type=2)
        c = y / n
        c[-1] /= 2.0
        return c / norms
    raise ValueError(f"unknown boundary {boundary!r}")


def sample_field(spec: CovarianceSpec, mean: float, rng: np.random.Generator) -> GridField:
    """Draw one field from N(mean, covariance of ``spec``) on the grid."""
    n = spec.grid_size
    scale = _synthesis_scale(spec)
    if spec.boundary == NEUMANN2D:
        xi = rng.standard_normal((n, n))
        values = dctn(scale * xi, type=3) + mean
    else:
        xi = rng.standard_normal(n)
        values = dst(scale * xi, type=3) + mean
    return GridField(spec.boundary, values, mean)


def grid_to_mesh(field: GridField, mesh) -> np.ndarray:
    """Interpolate a neumann2d field at triangle centroids.

    Bilinear interpolation on the cell-center lattice; in the margin strip
    between the outermost cell centers and the square's edge the boundary
    cells extrapolate linearly, so affine fields are reproduced exactly
    everywhere on [-1,1]^2.
    """
    if field.boundary != NEUMANN2D:
        raise ValueError("grid_to_mesh needs a neumann2d field")
    pts = mesh.centroids()
    if np.abs(pts).max() > 1.0 + 1e-12:
        raise GeometryError("triangle centroid outside [-1,1]^2")
    n = field.grid_size
    h = 2.0 / n
    x0 = -1.0 + 0.5 * h
    fx = (pts[:, 0] - x0) / h
    fy = (pts[:, 1] - x0) / h
    ix = np.clip(np.floor(fx).astype(int), 0, n - 2)
    iy = np.clip(np.floor(fy).astype(int), 0, n - 2)
    tx = fx - ix
    ty = fy - iy
    v = field.values
    return (
        (1 - tx) * (1 - ty) * v[ix, iy]
        + tx * (1 - ty) * v[ix + 1, iy]
        + (1 - tx) * ty * v[ix, iy + 1]
        + tx * ty * v[ix + 1, iy + 1]
    )


def radial_eval(field: GridField, theta: np.ndarray) -> np.ndarray:
    """Evaluate a dirichlet1d field at angles theta (any reals, wrapped).

    Linear interpolation between grid values. Every sine mode vanishes at
    theta = +/-pi, so the field's value at both ends of (-pi, pi] is its mean
    offset (zero fluctuation); interpolating against that endpoint value makes
    the result continuous across the wrap and exact at grid nodes.
    """
    if field.boundary != DIRICHLET1D:
        raise ValueError("radial_eval needs a dirichlet1d field")
    n = field.grid_size
    th = np.asarray(theta, dtype=float)
    wrapped = np.mod(th + math.pi, 2.0 * math.pi) - math.pi
    knots = np.empty(n + 2)
    knots[0] = -math.pi
    knots[1:-1] = grid_coordinates(DIRICHLET1D, n)
    knots[-1] = math.pi
    vals = np.empty(n + 2)
    vals[0] = field.mean_offset
    vals[1:-1] = field.values
    vals[-1] = field.mean_offset
    return np.interp(wrapped, knots, vals)


def write_field(path, field: GridField) -> None:
    """Write a field as a ``gridfield v1`` binary (text header + raw doubles)."""
    header = f"gridfield v1 {field.boundary} {field.grid_size} {field.mean_offset:.17g}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field(path) -> GridField:
    """Read a ``gridfield v1`` binary written by :func:`write_field`."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        payload = fh.read()
    parts = header.split()
    if len(parts) != 5 or parts[0] != "gridfield" or parts[1] != "v1":
        raise ValueError(f"bad gridfield header: {header!r}")
    boundary = parts[2]
    if boundary not in _BOUNDARIES:
        raise ValueError(f"bad gridfield boundary: {boundary!r}")
    n = int(parts[3])
    mean = float(parts[4])
    data = np.frombuffer(payload, dtype="<f8")
    expected = n * n if boundary == NEUMANN2D else n
    if data.size != expected:
        raise ValueError(f"gridfield payload has {data.size} values, expected {expected}")
    shape = (n, n) if boundary == NEUMANN2D else (n,)
    return GridField(boundary, data.reshape(shape).copy(), mean)
