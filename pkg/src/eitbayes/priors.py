"""Conductivity priors and the maps taking latent states to conductivities.

Three families. A log-Gaussian prior pushes a Gaussian field u on the square
through F1(u) = exp(u). A star-shaped prior describes a single inclusion by a
radial function r(theta) = h(g(theta)), h(z) = (1 + tanh z)/2, where g is a
Gaussian field on the circle around mean 0.5, together with a uniformly
distributed center; F2 assigns one conductivity inside the star set and
another outside. A level-set prior thresholds a Gaussian field on the square
into finitely many phases. All maps evaluate at triangle centroids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (
    DIRICHLET1D,
    NEUMANN2D,
    CovarianceSpec,
    GridField,
    grid_to_mesh,
    radial_eval,
    sample_field,
)
from .mesh import Mesh

LOG_GAUSSIAN = "log_gaussian"
STAR = "star"
LEVEL_SET = "level_set"


def star_transform(z):
    """Squash a raw radial value into (0, 1): h(z) = (1 + tanh z) / 2."""
    return 0.5 * (1.0 + np.tanh(z))


@dataclass
class LogGaussianState:
    field: GridField


@dataclass
class StarState:
    radius_raw: GridField  # dirichlet1d field, values include the 0.5 mean
    center: np.ndarray  # shape (2,)

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=float).reshape(2)


@dataclass
class LevelSetState:
    field: GridField


PriorState = LogGaussianState | StarState | LevelSetState


@dataclass(frozen=True)
class LogGaussianPrior:
    """F1(u) = exp(u) with u ~ N(mean, covariance)."""

    spec: CovarianceSpec
    mean: float

    def __post_init__(self) -> None:
        if self.spec.boundary != NEUMANN2D:
            raise ValueError("log-Gaussian prior needs a neumann2d covariance")

    family = LOG_GAUSSIAN

    def sample(self, rng: np.random.Generator) -> LogGaussianState:
        return LogGaussianState(sample_field(self.spec, self.mean, rng))

    def mean_state(self) -> LogGaussianState:
        n = self.spec.grid_size
        return LogGaussianState(GridField(NEUMANN2D, np.full((n, n), self.mean), self.mean))

    def conductivity(self, state: LogGaussianState, mesh: Mesh) -> np.ndarray:
        return f1_log_gaussian(state.field, mesh)


@dataclass(frozen=True)
class StarPrior:
    """Star-shaped inclusion: radius h(g), g ~ N(mean, covariance), uniform center."""

    spec: CovarianceSpec
    mean: float
    u_plus: float
    u_minus: float
    center_halfwidth: float = 0.5

    def __post_init__(self) -> None:
        if self.spec.boundary != DIRICHLET1D:
            raise ValueError("star prior needs a dirichlet1d covariance")
        if self.u_plus <= 0 or self.u_minus <= 0:
            raise ValueError("star conductivity values must be positive")
        if self.center_halfwidth <= 0:
            raise ValueError("center box halfwidth must be positive")

    family = STAR

    def sample(self, rng: np.random.Generator) -> StarState:
        field = sample_field(self.spec, self.mean, rng)
        hw = self.center_halfwidth
        center = rng.uniform(-hw, hw, size=2)
        return StarState(field, center)

    def mean_state(self) -> StarState:
        n = self.spec.grid_size
        field = GridField(DIRICHLET1D, np.full(n, self.mean), self.mean)
        return StarState(field, np.zeros(2))

    def conductivity(self, state: StarState, mesh: Mesh) -> np.ndarray:
        return f2_star_shaped(state, mesh, self.u_plus, self.u_minus)

    def center_legal(self, center: np.ndarray) -> bool:
        return bool(np.abs(center).max() <= self.center_halfwidth)


@dataclass(frozen=True)
class LevelSetPrior:
    """Threshold a Gaussian field into len(phases) conductivity phases."""

    spec: CovarianceSpec
    mean: float
    thresholds: tuple[float, ...]
    phases: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.spec.boundary != NEUMANN2D:
            raise ValueError("level-set prior needs a neumann2d covariance")
        t = tuple(float(c) for c in self.thresholds)
        p = tuple(float(f) for f in self.phases)
        if len(p) != len(t) + 1:
            raise ValueError(f"{len(t)} thresholds need {len(t) + 1} phases, got {len(p)}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if any(f <= 0 for f in p):
            raise ValueError("phase conductivities must be positive")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "phases", p)

    family = LEVEL_SET

    def sample(self, rng: np.random.Generator) -> LevelSetState:
        return LevelSetState(sample_field(self.spec, self.mean, rng))

    def mean_state(self) -> LevelSetState:
        n = self.spec.grid_size
        return LevelSetState(GridField(NEUMANN2D, np.full((n, n), self.mean), self.mean))

    def conductivity(self, state: LevelSetState, mesh: Mesh) -> np.ndarray:
        return f3_level_set(state.field, mesh, self.thresholds, self.phases)


Prior = LogGaussianPrior | StarPrior | LevelSetPrior


def prior_sample(prior: Prior, rng: np.random.Generator) -> PriorState:
    """Draw one latent state from the prior."""
    return prior.sample(rng)


def f1_log_gaussian(field: GridField, mesh: Mesh) -> np.ndarray:
    """Per-triangle conductivity exp(u) at centroids."""
    return np.exp(grid_to_mesh(field, mesh))


def star_radius(state: StarState, theta: np.ndarray) -> np.ndarray:
    """Inclusion radius r(theta) = h(g(theta)) of a star state."""
    return star_transform(radial_eval(state.radius_raw, theta))


def f2_star_shaped(
    state: StarState, mesh: Mesh, u_plus: float, u_minus: float
) -> np.ndarray:
    """Two-valued conductivity: u_plus inside the star set, u_minus outside.

    A centroid c is inside when |c - x0| <= r(atan2(c - x0)); points on the
    boundary curve count as inside.
    """
    if u_plus <= 0 or u_minus <= 0:
        raise ValueError("conductivity values must be positive")
    d = mesh.centroids() - state.center
    dist = np.hypot(d[:, 0], d[:, 1])
    theta = np.arctan2(d[:, 1], d[:, 0])
    inside = dist <= star_radius(state, theta)
    return np.where(inside, float(u_plus), float(u_minus))


def f3_level_set(
    field: GridField, mesh: Mesh, thresholds, phases
) -> np.ndarray:
    """Piecewise-constant conductivity from level-set bins [c_{i-1}, c_i).

    Values exactly at a threshold belong to the upper bin.
    """
    t = np.asarray(thresholds, dtype=float)
    p = np.asarray(phases, dtype=float)
    if p.size != t.size + 1:
        raise ValueError(f"{t.size} thresholds need {t.size + 1} phases, got {p.size}")
    u = grid_to_mesh(field, mesh)
    return p[np.searchsorted(t, u, side="right")]


def measure_of_symmetric_difference(
    mesh: Mesh, sigma_a: np.ndarray, sigma_b: np.ndarray, tol: float = 1e-12
) -> float:
    """Total area of triangles where two conductivities disagree beyond tol."""
    a = np.asarray(sigma_a, dtype=float)
    b = np.asarray(sigma_b, dtype=float)
    if a.shape != b.shape or a.shape != (mesh.n_triangles,):
        raise ValueError("conductivities must both be per-triangle vectors of this mesh")
    return float(mesh.areas()[np.abs(a - b) > tol].sum())
