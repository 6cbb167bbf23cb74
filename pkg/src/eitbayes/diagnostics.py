"""Chain diagnostics: effective sample size, densities, misfit tables, rasters.

The effective sample size of a scalar trace of length N is

    ESS = N / (1 + 2 sum_k rho_k)

with the biased autocorrelation estimator rho_k and the sum truncated at the
first lag with a negative estimate. Kernel densities use a Gaussian kernel
with Silverman's bandwidth rule, renormalized on their evaluation grid.

Conductivity fields render as binary PPM (P6) rasters with a linear
blue-to-yellow ramp: the low end of the value window maps to (0, 0, 255), the
high end to (255, 255, 0), and pixels outside the meshed disk stay white.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde

from .fields import DIRICHLET1D, NEUMANN2D, GridField, transform_coefficients
from .inference import ChainRecord, MeanSummary, PotentialEvaluator
from .mesh import Mesh
from .priors import STAR, Prior

PALETTE_LOW = (0, 0, 255)
PALETTE_HIGH = (255, 255, 0)
PALETTE_BACKGROUND = (255, 255, 255)


def autocorrelation(values: np.ndarray) -> np.ndarray:
    """Biased (1/N) autocorrelation estimates for all lags of a scalar trace."""
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValueError("trace too short for autocorrelation")
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0.0:
        raise ValueError("degenerate trace")
    m = next_fast_len(2 * n)
    f = rfft(x, m)
    acov = irfft(f * np.conj(f), m)[:n] / n
    return acov / acov[0]


def ess(values: np.ndarray) -> float:
    """Effective sample size with initial-positive truncation of the lag sum."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 100:
        raise ValueError(f"trace must have at least 100 values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("trace contains non-finite values")
    rho = autocorrelation(x)
    tail = rho[1:]
    negative = np.flatnonzero(tail < 0)
    cut = negative[0] if negative.size else tail.size
    return x.size / (1.0 + 2.0 * float(tail[:cut].sum()))


def thin_to_ess(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Subsample a trace to roughly its effective sample size.

    Returns the thinned values and the stride used.
    """
    x = np.asarray(values, dtype=float).ravel()
    stride = max(1, int(round(x.size / ess(x))))
    return x[::stride], stride


@dataclass
class DensityEstimate:
    """A kernel density evaluated on a fixed grid, normalized to unit mass."""

    points: tuple[np.ndarray, ...]  # one axis per dimension
    density: np.ndarray
    bandwidths: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.points)


def _silverman_kde(samples: np.ndarray) -> gaussian_kde:
    if samples.shape[-1] < 10:
        raise ValueError(f"need at least 10 samples for a density, got {samples.shape[-1]}")
    try:
        return gaussian_kde(samples, bw_method="silverman")
    except np.linalg.LinAlgError as exc:
        raise ValueError("degenerate samples: singular covariance") from exc


def kde_1d(values: np.ndarray, grid: np.ndarray) -> DensityEstimate:
    """Gaussian-kernel density of a scalar sample on a 1-d grid."""
    x = np.asarray(values, dtype=float).ravel()
    g = np.asarray(grid, dtype=float).ravel()
    if g.size < 2:
        raise ValueError("grid needs at least 2 points")
    kde = _silverman_kde(x[None, :])
    density = kde(g)
    mass = trapezoid(density, g)
    if mass <= 0:
        raise ValueError("density has no mass on the grid; widen the grid")
    return DensityEstimate(
        points=(g,),
        density=density / mass,
        bandwidths=(float(np.sqrt(kde.covariance[0, 0])),),
    )


def kde_2d(values_x: np.ndarray, values_y: np.ndarray, grid_x: np.ndarray, grid_y: np.ndarray) -> DensityEstimate:
    """Gaussian-kernel density of a sample pair on a tensor grid."""
    x = np.asarray(values_x, dtype=float).ravel()
    y = np.asarray(values_y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("paired traces must have equal length")
    gx = np.asarray(grid_x, dtype=float).ravel()
    gy = np.asarray(grid_y, dtype=float).ravel()
    if gx.size < 2 or gy.size < 2:
        raise ValueError("grid needs at least 2 points per axis")
    kde = _silverman_kde(np.vstack([x, y]))
    mx, my = np.meshgrid(gx, gy, indexing="ij")
    density = kde(np.vstack([mx.ravel(), my.ravel()])).reshape(gx.size, gy.size)
    mass = trapezoid(trapezoid(density, gy, axis=1), gx)
    if mass <= 0:
        raise ValueError("density has no mass on the grid; widen the grid")
    bw = np.sqrt(np.diag(kde.covariance))
    return DensityEstimate(
        points=(gx, gy),
        density=density / mass,
        bandwidths=(float(bw[0]), float(bw[1])),
    )


def density_mass(estimate: DensityEstimate) -> float:
    """Grid-quadrature mass of a density estimate (should be 1)."""
    if estimate.dim == 1:
        return float(trapezoid(estimate.density, estimate.points[0]))
    gx, gy = estimate.points
    return float(trapezoid(trapezoid(estimate.density, gy, axis=1), gx))


def write_density_csv(path, estimate: DensityEstimate) -> None:
    """Write a density estimate as CSV (long format for 2-d grids)."""
    with open(path, "w", newline="\n") as fh:
        if estimate.dim == 1:
            fh.write("point,density\n")
            for p, d in zip(estimate.points[0], estimate.density):
                fh.write("%.17g,%.17g\n" % (p, d))
        else:
            fh.write("x,y,density\n")
            gx, gy = estimate.points
            for i, px in enumerate(gx):
                for j, py in enumerate(gy):
                    fh.write("%.17g,%.17g,%.17g\n" % (px, py, estimate.density[i, j]))


def fourier_monitor(field: GridField, modes) -> np.ndarray:
    """Synthesis coefficients of (field - mean) at the listed modes.

    Modes are (k1, k2) pairs for neumann2d fields (k1 along x, k2 along y,
    zero-based) and 1-based integers k for dirichlet1d fields.
    """
    coeffs = transform_coefficients(field.boundary, field.values - field.mean_offset)
    n = field.grid_size
    out = []
    for mode in modes:
        if field.boundary == NEUMANN2D:
            k = tuple(int(i) for i in np.atleast_1d(mode))
            if len(k) != 2 or not all(0 <= i < n for i in k):
                raise ValueError(f"mode {mode!r} outside the {n}x{n} grid's range")
            out.append(coeffs[k])
        else:
            k = int(mode) if np.isscalar(mode) else int(np.atleast_1d(mode)[0])
            if not 1 <= k <= n:
                raise ValueError(f"mode {mode!r} outside 1..{n}")
            out.append(coeffs[k - 1])
    return np.array(out)


def iteration_series(
    columns: tuple[str, ...], trace: np.ndarray, burn_in: int, family: str
) -> dict[str, np.ndarray]:
    """Post-burn-in per-iteration series for phi and every monitor column.

    Star chains log two rows per iteration; the row after the center move
    (the state the iteration ends in) represents that iteration.
    """
    iters = trace[:, columns.index("iteration")]
    mask = iters >= burn_in
    if family == STAR:
        mask &= trace[:, columns.index("move")] == 1.0
    return {name: trace[mask, columns.index(name)] for name in columns[3:]}


def ess_table_from_trace(
    columns: tuple[str, ...], trace: np.ndarray, burn_in: int, family: str
) -> list[tuple[str, float]]:
    """ESS per monitored quantity; constant columns come back as nan."""
    out = []
    for name, series in iteration_series(columns, trace, burn_in, family).items():
        try:
            out.append((name, ess(series)))
        except ValueError:
            out.append((name, math.nan))
    return out


def ess_table(record: ChainRecord) -> list[tuple[str, float]]:
    """ESS of phi and each monitor over post-burn-in, one value per iteration."""
    return ess_table_from_trace(
        record.columns, record.trace, record.config.burn_in, record.family
    )


def misfit_report(
    prior: Prior, summary: MeanSummary, evaluator: PotentialEvaluator
) -> list[tuple[str, float]]:
    """Misfit at the prior mean and at the two posterior means.

    Rows: the prior mean state pushed through the conductivity map, the
    posterior mean state pushed through the map, and the posterior mean
    conductivity used directly as a per-triangle field.
    """
    prior_sigma = prior.conductivity(prior.mean_state(), evaluator.mesh)
    return [
        ("prior_mean", evaluator.phi_of_sigma(prior_sigma)),
        ("map_of_mean_state", evaluator.phi_of_sigma(summary.sigma_of_mean_state)),
        ("mean_conductivity", evaluator.phi_of_sigma(summary.mean_sigma)),
    ]


def write_table_csv(path, rows: list[tuple[str, float]], header: tuple[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for name, value in rows:
            writer.writerow((name, "%.17g" % value))


def format_table_text(rows: list[tuple[str, float]], header: tuple[str, str]) -> str:
    """Align a (label, value) table for plain-text output."""
    width = max(len(header[0]), *(len(name) for name, _ in rows))
    lines = [f"{header[0]:<{width}}  {header[1]}"]
    for name, value in rows:
        lines.append(f"{name:<{width}}  {value:.6g}")
    return "\n".join(lines) + "\n"


def render_conductivity_ppm(
    path,
    mesh: Mesh,
    values: np.ndarray,
    resolution: int = 256,
    vmin: float | None = None,
    vmax: float | None = None,
) -> None:
    """Rasterize a per-triangle field to a binary PPM (P6) image.

    Pixel centers sample the square [-1,1]^2, row 0 at the top (largest y).
    Values clamp to [vmin, vmax] and map linearly onto the blue-to-yellow
    ramp; pixels not covered by any triangle stay white.
    """
    vals = np.asarray(values, dtype=float)
    if vals.shape != (mesh.n_triangles,):
        raise ValueError(
            f"need one value per triangle ({mesh.n_triangles}), got shape {vals.shape}"
        )
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    lo = float(vals.min()) if vmin is None else float(vmin)
    hi = float(vals.max()) if vmax is None else float(vmax)
    span = hi - lo
    image = np.empty((resolution, resolution, 3), dtype=np.uint8)
    image[:] = PALETTE_BACKGROUND
    centers = (2.0 * np.arange(resolution) + 1.0) / resolution - 1.0
    xs = centers
    ys = centers[::-1]
    low = np.array(PALETTE_LOW, dtype=float)
    high = np.array(PALETTE_HIGH, dtype=float)
    tri_nodes = mesh.nodes[mesh.triangles]
    for t in range(mesh.n_triangles):
        (x1, y1), (x2, y2), (x3, y3) = tri_nodes[t]
        j_lo = np.searchsorted(xs, min(x1, x2, x3) - 1e-12)
        j_hi = np.searchsorted(xs, max(x1, x2, x3) + 1e-12)
        i_lo = resolution - np.searchsorted(ys[::-1], max(y1, y2, y3) + 1e-12)
        i_hi = resolution - np.searchsorted(ys[::-1], min(y1, y2, y3) - 1e-12)
        if j_lo >= j_hi or i_lo >= i_hi:
            continue
        px, py = np.meshgrid(xs[j_lo:j_hi], ys[i_lo:i_hi], indexing="xy")
        det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
        a = ((y2 - y3) * (px - x3) + (x3 - x2) * (py - y3)) / det
        b = ((y3 - y1) * (px - x3) + (x1 - x3) * (py - y3)) / det
        c = 1.0 - a - b
        inside = (a >= -1e-12) & (b >= -1e-12) & (c >= -1e-12)
        if not inside.any():
            continue
        frac = 0.5 if span <= 0 else min(1.0, max(0.0, (vals[t] - lo) / span))
        rgb = np.round(low + frac * (high - low)).astype(np.uint8)
        block = image[i_lo:i_hi, j_lo:j_hi]
        block[inside] = rgb
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (resolution, resolution))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read back a binary PPM written by this module (for tests and tooling)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a binary PPM: magic {magic!r}")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"unsupported max value {maxval}")
        w, h = int(dims[0]), int(dims[1])
        data = fh.read(w * h * 3)
    if len(data) != w * h * 3:
        raise ValueError("truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
