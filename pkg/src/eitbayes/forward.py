"""Complete electrode model forward solver, P1 finite elements.

The weak form couples the interior potential v with electrode voltages V:

    B((v, V), (w, W)) = int_D sigma grad v . grad w dx
                      + sum_l (1/z_l) int_{e_l} (v - V_l)(w - W_l) dS,

driven by r(w, W) = sum_l I_l W_l for an injected current pattern I with
sum_l I_l = 0. Solutions are unique up to an additive constant; the system is
grounded by one Lagrange-multiplier row enforcing sum_l V_l = 0, which keeps
the matrix symmetric. Unknown ordering: n_nodes interior values, then L
electrode voltages, then the multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ElectrodeLayout, Mesh

RESIDUAL_TOL = 1e-10

# SuperLU ordering: measured crossover on saddle systems from these meshes
_MMD_CUTOFF = 4000


class AdmissibilityError(ValueError):
    """Conductivity outside the admissible class (positive, bounded)."""


class ChargeConservationError(ValueError):
    """Stimulation pattern does not sum to zero."""


class SolverError(RuntimeError):
    """Direct solve failed or exceeded the residual tolerance."""


@dataclass
class ForwardSolution:
    """Solution of one stimulation: interior potential and electrode voltages."""

    v: np.ndarray
    V: np.ndarray


def adjacent_stimulation_patterns(n_electrodes: int, amplitude: float) -> np.ndarray:
    """Adjacent-pair current patterns, one column per driven pair.

    Column j injects +amplitude at electrode j and -amplitude at electrode
    j+1, for j = 0..L-2, giving an L x (L-1) matrix of zero-sum columns.
    """
    if n_electrodes < 2:
        raise ValueError("need at least 2 electrodes")
    if amplitude <= 0:
        raise ValueError(f"amplitude must be positive, got {amplitude}")
    L = n_electrodes
    I = np.zeros((L, L - 1))
    idx = np.arange(L - 1)
    I[idx, idx] = amplitude
    I[idx + 1, idx] = -amplitude
    return I


def check_conductivity(sigma: np.ndarray, n_triangles: int) -> np.ndarray:
    """Validate a per-triangle conductivity vector, returning it as float array."""
    s = np.asarray(sigma, dtype=float)
    if s.shape != (n_triangles,):
        raise AdmissibilityError(
            f"conductivity must have one value per triangle ({n_triangles}), got shape {s.shape}"
        )
    if not np.all(np.isfinite(s)):
        raise AdmissibilityError("conductivity contains non-finite values")
    if s.min() <= 0.0:
        raise AdmissibilityError(f"conductivity must be positive, min is {s.min():.3e}")
    return s


def check_patterns(patterns: np.ndarray, n_electrodes: int) -> np.ndarray:
    """Validate stimulation patterns, returning them as a (L, J) float array."""
    I = np.asarray(patterns, dtype=float)
    if I.ndim == 1:
        I = I[:, None]
    if I.ndim != 2 or I.shape[0] != n_electrodes:
        raise ChargeConservationError(
            f"patterns must have shape ({n_electrodes}, J), got {np.shape(patterns)}"
        )
    if not np.all(np.isfinite(I)):
        raise ChargeConservationError("pattern contains non-finite values")
    sums = np.abs(I.sum(axis=0))
    tol = 1e-12 * np.linalg.norm(I, axis=0)
    bad = np.flatnonzero(sums > tol)
    if bad.size:
        j = int(bad[0])
        raise ChargeConservationError(
            f"pattern {j} sums to {I[:, j].sum():.3e}, violating charge conservation"
        )
    return I


class CEMSystem:
    """Assembled geometry of the complete electrode model on one mesh/layout.

    Precomputes everything independent of the conductivity (local stiffness
    blocks, electrode boundary blocks, grounding row) so that repeated solves
    with fresh conductivities only rebuild and refactor the sparse matrix.
    """

    def __init__(self, mesh: Mesh, layout: ElectrodeLayout):
        mesh.validate()
        self.mesh = mesh
        self.layout = layout
        L = layout.n_electrodes
        present = set(int(e) for e in mesh.edge_electrode if e >= 0)
        missing = [l for l in range(L) if l not in present]
        if missing or (present and max(present) >= L):
            raise ValueError(
                f"mesh and layout disagree: electrodes {missing or sorted(present)} "
                f"not consistent with L = {L}"
            )
        self.n_nodes = mesh.n_nodes
        self.n_system = self.n_nodes + L + 1

        # P1 stiffness: grad lambda_i = (y_j - y_k, x_k - x_j) / (2A), cyclic
        p = mesh.nodes[mesh.triangles]
        x, y = p[..., 0], p[..., 1]
        b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        areas = mesh.areas()
        local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
            4.0 * areas[:, None, None]
        )
        tri = mesh.triangles
        self._stiff_rows = np.repeat(tri, 3, axis=1).ravel()
        self._stiff_cols = np.tile(tri, (1, 3)).ravel()
        self._stiff_base = local.reshape(mesh.n_triangles, 9)

        # electrode boundary blocks, fixed for fixed contact impedances
        rows, cols, vals = [], [], []
        z = layout.contact_impedance
        lengths = mesh.edge_lengths()
        for k in range(mesh.n_boundary_edges):
            l = int(mesh.edge_electrode[k])
            if l < 0:
                continue
            a, bn = (int(i) for i in mesh.boundary_edges[k])
            ell = lengths[k]
            w = 1.0 / z[l]
            col_l = self.n_nodes + l
            # edge mass block (ell/6) [[2,1],[1,2]] scaled by 1/z_l
            rows += [a, a, bn, bn]
            cols += [a, bn, a, bn]
            vals += [w * ell / 3.0, w * ell / 6.0, w * ell / 6.0, w * ell / 3.0]
            # coupling -(1/z_l)(ell/2) between each edge node and V_l
            rows += [a, col_l, bn, col_l]
            cols += [col_l, a, col_l, bn]
            vals += [-w * ell / 2.0] * 4
            # electrode diagonal (1/z_l)|e_l| accumulated edge by edge
            rows.append(col_l)
            cols.append(col_l)
            vals.append(w * ell)
        ground = self.n_system - 1
        self._ground_rows = []
        self._ground_cols = []
        for l in range(L):
            self._ground_rows += [ground, self.n_nodes + l]
            self._ground_cols += [self.n_nodes + l, ground]
        self._bdry_rows = np.array(rows, dtype=np.int64)
        self._bdry_cols = np.array(cols, dtype=np.int64)
        self._bdry_vals = np.array(vals)

        self._rows = np.concatenate(
            [self._stiff_rows, self._bdry_rows, np.array(self._ground_rows, dtype=np.int64)]
        )
        self._cols = np.concatenate(
            [self._stiff_cols, self._bdry_cols, np.array(self._ground_cols, dtype=np.int64)]
        )
        self._tail = np.concatenate([self._bdry_vals, np.ones(2 * L)])

    def assemble(self, sigma: np.ndarray) -> sp.csc_matrix:
        """Grounded system matrix for the given conductivity."""
        s = check_conductivity(sigma, self.mesh.n_triangles)
        data = np.concatenate([(self._stiff_base * s[:, None]).ravel(), self._tail])
        return sp.csc_matrix((data, (self._rows, self._cols)), shape=(self.n_system, self.n_system))

    def assemble_ungrounded(self, sigma: np.ndarray) -> sp.csc_matrix:
        """System matrix without the grounding row; its kernel is the constant vector."""
        s = check_conductivity(sigma, self.mesh.n_triangles)
        n = self.n_nodes + self.layout.n_electrodes
        data = np.concatenate([(self._stiff_base * s[:, None]).ravel(), self._bdry_vals])
        rows = np.concatenate([self._stiff_rows, self._bdry_rows])
        cols = np.concatenate([self._stiff_cols, self._bdry_cols])
        return sp.csc_matrix((data, (rows, cols)), shape=(n, n))

    def factorize(self, sigma: np.ndarray) -> "CEMFactorization":
        """Direct sparse factorization of the grounded system."""
        A = self.assemble(sigma)
        spec = "MMD_AT_PLUS_A" if self.n_system < _MMD_CUTOFF else "COLAMD"
        try:
            lu = spla.splu(A, permc_spec=spec)
        except RuntimeError as exc:  # SuperLU signals singularity this way
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        return CEMFactorization(self, A, lu)

    def solve(self, sigma: np.ndarray, pattern: np.ndarray) -> ForwardSolution:
        """Solve a single stimulation pattern."""
        return self.factorize(sigma).solve(pattern)

    def forward(self, sigma: np.ndarray, patterns: np.ndarray) -> np.ndarray:
        """Concatenated electrode voltages for every pattern, pattern-major."""
        fact = self.factorize(sigma)
        I = check_patterns(patterns, self.layout.n_electrodes)
        V = fact.solve_voltages(I)
        return V.T.ravel()


class CEMFactorization:
    """A factorized system matrix, reusable across stimulation patterns."""

    def __init__(self, system: CEMSystem, matrix: sp.csc_matrix, lu):
        self._system = system
        self._matrix = matrix
        self._lu = lu

    def _rhs(self, I: np.ndarray) -> np.ndarray:
        n, L = self._system.n_nodes, self._system.layout.n_electrodes
        b = np.zeros((self._system.n_system, I.shape[1]))
        b[n : n + L, :] = I
        return b

    def _check_residual(self, b: np.ndarray, x: np.ndarray) -> None:
        r = self._matrix @ x - b
        scale = np.linalg.norm(b)
        rel = np.linalg.norm(r) / scale if scale > 0 else np.linalg.norm(r)
        if not np.isfinite(rel) or rel > RESIDUAL_TOL:
            raise SolverError(f"solve residual {rel:.3e} exceeds {RESIDUAL_TOL:.0e}")

    def solve_full(self, patterns: np.ndarray) -> np.ndarray:
        """Raw solution columns (nodes, voltages, multiplier) for each pattern."""
        I = check_patterns(patterns, self._system.layout.n_electrodes)
        b = self._rhs(I)
        x = self._lu.solve(b)
        self._check_residual(b, x)
        return x

    def solve_voltages(self, patterns: np.ndarray) -> np.ndarray:
        """Electrode voltages, shape (L, J)."""
        n, L = self._system.n_nodes, self._system.layout.n_electrodes
        return self.solve_full(patterns)[n : n + L, :]

    def solve(self, pattern: np.ndarray) -> ForwardSolution:
        x = self.solve_full(np.asarray(pattern, dtype=float).reshape(-1, 1))
        n, L = self._system.n_nodes, self._system.layout.n_electrodes
        return ForwardSolution(v=x[:n, 0].copy(), V=x[n : n + L, 0].copy())


def assemble_system(mesh: Mesh, layout: ElectrodeLayout, sigma: np.ndarray) -> sp.csc_matrix:
    """Grounded complete electrode model matrix (convenience wrapper)."""
    return CEMSystem(mesh, layout).assemble(sigma)


def solve_forward(
    mesh: Mesh, layout: ElectrodeLayout, sigma: np.ndarray, pattern: np.ndarray
) -> ForwardSolution:
    """Solve one stimulation pattern on the given mesh."""
    return CEMSystem(mesh, layout).solve(sigma, pattern)


def forward_map(
    mesh: Mesh, layout: ElectrodeLayout, sigma: np.ndarray, patterns: np.ndarray
) -> np.ndarray:
    """Voltages of all patterns concatenated pattern-major (the map G)."""
    return CEMSystem(mesh, layout).forward(sigma, patterns)


def resistivity_matrix(mesh: Mesh, layout: ElectrodeLayout, sigma: np.ndarray) -> np.ndarray:
    """Electrode resistivity matrix R with V = R I for zero-sum currents.

    Columns are the voltage responses to the zero-sum basis e_l - (1/L) 1, so
    R maps zero-sum currents to mean-zero voltages and kills constants.
    Reciprocity makes R symmetric up to solver accuracy.
    """
    system = CEMSystem(mesh, layout)
    L = layout.n_electrodes
    basis = np.eye(L) - np.full((L, L), 1.0 / L)
    return system.factorize(sigma).solve_voltages(basis)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    """Write a matrix (or column vector) as headerless CSV, 17 significant digits."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="\n") as fh:
        for row in m:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    """Read a headerless numeric CSV written by write_matrix_csv."""
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric cell") from None
    if not rows:
        raise ValueError("empty matrix file")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError("ragged rows in matrix file")
    return np.array(rows, dtype=float)
