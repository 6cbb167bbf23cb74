"""Triangular meshes of the unit disk with boundary electrode arcs."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

NO_ELECTRODE = -1

# level-0 resolution of the structured polar generator
_BASE_RINGS = 3

_FLOAT_FMT = "%.17g"


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed or fails validation on read."""


@dataclass(frozen=True)
class ElectrodeLayout:
    """Electrode arrangement on the disk boundary.

    Parameters
    ----------
    n_electrodes : int
        Number of electrodes L, at least 2. Electrode l occupies the boundary
        arc centered at angle 2*pi*l/L.
    coverage : float
        Fraction of the boundary covered by electrodes, strictly inside (0, 1).
    contact_impedance : array_like
        Positive contact impedance per electrode; a scalar is broadcast to all L.
    """

    n_electrodes: int
    coverage: float
    contact_impedance: np.ndarray

    def __post_init__(self) -> None:
        if int(self.n_electrodes) != self.n_electrodes or self.n_electrodes < 2:
            raise ValueError(f"need at least 2 electrodes, got {self.n_electrodes}")
        object.__setattr__(self, "n_electrodes", int(self.n_electrodes))
        if not 0.0 < self.coverage < 1.0:
            raise ValueError(f"coverage must lie strictly in (0, 1), got {self.coverage}")
        z = np.atleast_1d(np.asarray(self.contact_impedance, dtype=float))
        if z.size == 1:
            z = np.full(self.n_electrodes, float(z[0]))
        if z.shape != (self.n_electrodes,):
            raise ValueError(
                f"contact_impedance must be a scalar or length {self.n_electrodes}, got shape {z.shape}"
            )
        if not np.all(np.isfinite(z)) or not np.all(z > 0.0):
            raise ValueError("contact impedances must be finite and positive")
        z.flags.writeable = False
        object.__setattr__(self, "contact_impedance", z)

    def arc_bounds(self, l: int) -> tuple[float, float]:
        """Angular interval (start, end) of electrode l, with end > start."""
        center = 2.0 * math.pi * l / self.n_electrodes
        half = self.coverage * math.pi / self.n_electrodes
        return center - half, center + half

    @property
    def arc_length(self) -> float:
        """Arc length of a single electrode."""
        return self.coverage * 2.0 * math.pi / self.n_electrodes


@dataclass(eq=False)
class Mesh:
    """Conforming triangulation of the unit disk.

    Attributes
    ----------
    nodes : ndarray, shape (n_nodes, 2)
        Vertex coordinates.
    triangles : ndarray, shape (n_triangles, 3)
        Vertex indices, counterclockwise. Clockwise input is reoriented with
        a warning; degenerate triangles are rejected.
    boundary_edges : ndarray, shape (n_edges, 2)
        Node index pairs of boundary edges, ordered along the boundary.
    edge_electrode : ndarray, shape (n_edges,)
        Electrode id of each boundary edge, or NO_ELECTRODE for gap edges.
    edge_midpoint_angle : ndarray, shape (n_edges,)
        Angle of each boundary edge's arc midpoint, in [0, 2*pi).
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_electrode: np.ndarray
    edge_midpoint_angle: np.ndarray
    _areas: np.ndarray | None = field(default=None, repr=False, compare=False)
    _centroids: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.boundary_edges = np.asarray(self.boundary_edges, dtype=np.int64)
        self.edge_electrode = np.asarray(self.edge_electrode, dtype=np.int64)
        self.edge_midpoint_angle = np.asarray(self.edge_midpoint_angle, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise ValueError(f"nodes must have shape (n, 2), got {self.nodes.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must have shape (m, 3), got {self.triangles.shape}")
        signed = self._signed_areas()
        clockwise = signed < 0.0
        if np.any(clockwise):
            warnings.warn(
                f"reoriented {int(clockwise.sum())} clockwise triangle(s) to counterclockwise",
                stacklevel=2,
            )
            tri = self.triangles.copy()
            tri[clockwise] = tri[clockwise][:, [0, 2, 1]]
            self.triangles = tri
            signed = np.abs(signed)
        if np.any(signed <= 0.0):
            bad = int(np.flatnonzero(signed <= 0.0)[0])
            raise ValueError(f"triangle {bad} is degenerate (zero area)")
        self._areas = signed

    def _signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_boundary_edges(self) -> int:
        return self.boundary_edges.shape[0]

    def areas(self) -> np.ndarray:
        """Positive triangle areas."""
        if self._areas is None:
            self._areas = self._signed_areas()
        return self._areas

    def centroids(self) -> np.ndarray:
        """Triangle centroids, shape (n_triangles, 2)."""
        if self._centroids is None:
            self._centroids = self.nodes[self.triangles].mean(axis=1)
        return self._centroids

    def edge_lengths(self) -> np.ndarray:
        """Chord lengths of the boundary edges."""
        d = self.nodes[self.boundary_edges[:, 1]] - self.nodes[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def electrode_edges(self, l: int) -> np.ndarray:
        """Indices of the boundary edges under electrode l."""
        return np.flatnonzero(self.edge_electrode == l)

    def validate(self) -> None:
        """Check structural invariants, raising ValueError on the first failure."""
        n = self.n_nodes
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle node index out of range")
        if self.boundary_edges.size and (
            self.boundary_edges.min() < 0 or self.boundary_edges.max() >= n
        ):
            raise ValueError("boundary edge node index out of range")
        if self.boundary_edges.shape[0] != self.edge_electrode.shape[0]:
            raise ValueError("edge_electrode length does not match boundary_edges")
        if self.boundary_edges.shape[0] != self.edge_midpoint_angle.shape[0]:
            raise ValueError("edge_midpoint_angle length does not match boundary_edges")
        bnodes = np.unique(self.boundary_edges)
        r = np.hypot(self.nodes[bnodes, 0], self.nodes[bnodes, 1])
        off = np.abs(r - 1.0)
        if off.size and off.max() > 1e-12:
            raise ValueError(f"boundary node off the unit circle by {off.max():.3e}")
        # boundary edges must close into a single cycle
        counts = np.zeros(n, dtype=int)
        for a, b in self.boundary_edges:
            counts[a] += 1
            counts[b] += 1
        if self.boundary_edges.size and not np.all(counts[bnodes] == 2):
            raise ValueError("boundary edges do not form a closed loop")


def build_disk_mesh(refinement_level: int, layout: ElectrodeLayout) -> Mesh:
    """Build a structured polar triangulation of the unit disk.

    The angular grid contains every electrode arc endpoint, so each boundary
    edge lies entirely under one electrode or entirely in a gap, and the total
    arc length under electrode l is exactly coverage*2*pi/L. Both the ring
    count and the angular resolution double with each refinement level, so the
    element count roughly quadruples.

    Parameters
    ----------
    refinement_level : int
        Non-negative refinement level. Level 0 gives one boundary edge per
        electrode (at coverage 1/2); inversion meshes should use level >= 1 so
        that each electrode carries at least two edges.
    layout : ElectrodeLayout
        Electrode count, coverage and contact impedances.

    Returns
    -------
    Mesh
    """
    if refinement_level < 0 or int(refinement_level) != refinement_level:
        raise ValueError(f"refinement_level must be a non-negative integer, got {refinement_level}")
    level = int(refinement_level)
    L = layout.n_electrodes
    cov = layout.coverage

    per_elec = 2**level
    per_gap = max(1, round(per_elec * (1.0 - cov) / cov))
    n_rings = _BASE_RINGS * 2**level

    # angular breakpoints, starting at the leading edge of electrode 0
    half = cov * math.pi / L
    gap_width = 2.0 * math.pi / L - 2.0 * half
    breaks: list[float] = []
    tags: list[int] = []
    for l in range(L):
        center = 2.0 * math.pi * l / L
        for k in range(per_elec):
            breaks.append(center - half + 2.0 * half * k / per_elec)
            tags.append(l)
        for k in range(per_gap):
            breaks.append(center + half + gap_width * k / per_gap)
            tags.append(NO_ELECTRODE)
    theta = np.array(breaks)
    n_theta = theta.size

    nodes = np.empty((1 + n_rings * n_theta, 2))
    nodes[0] = 0.0
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    for i in range(1, n_rings + 1):
        # i == n_rings gives r == 1.0 exactly, so outer nodes sit on the circle
        r = i / n_rings
        rows = slice(1 + (i - 1) * n_theta, 1 + i * n_theta)
        nodes[rows, 0] = r * cos_t
        nodes[rows, 1] = r * sin_t

    def node(i: int, j: int) -> int:
        return 1 + (i - 1) * n_theta + (j % n_theta)

    tris = np.empty((n_theta * (2 * n_rings - 1), 3), dtype=np.int64)
    t = 0
    for j in range(n_theta):
        tris[t] = (0, node(1, j), node(1, j + 1))
        t += 1
    for i in range(1, n_rings):
        for j in range(n_theta):
            a, b = node(i, j), node(i, j + 1)
            c, d = node(i + 1, j + 1), node(i + 1, j)
            # the polar chart reverses orientation, so order for physical ccw
            tris[t] = (a, c, b)
            tris[t + 1] = (a, d, c)
            t += 2

    edges = np.empty((n_theta, 2), dtype=np.int64)
    mid = np.empty(n_theta)
    for j in range(n_theta):
        edges[j] = (node(n_rings, j), node(n_rings, j + 1))
        upper = breaks[j + 1] if j + 1 < n_theta else breaks[0] + 2.0 * math.pi
        mid[j] = ((breaks[j] + upper) / 2.0) % (2.0 * math.pi)

    mesh = Mesh(nodes, tris, edges, np.array(tags, dtype=np.int64), mid)
    mesh.validate()
    return mesh


def write_mesh(path, mesh: Mesh) -> None:
    """Write a mesh as a plain-text ``eitmesh v1`` file (LF newlines)."""
    lines = ["eitmesh v1"]
    lines.append(f"nodes {mesh.n_nodes}")
    for x, y in mesh.nodes:
        lines.append(f"{_FLOAT_FMT % x} {_FLOAT_FMT % y}")
    lines.append(f"triangles {mesh.n_triangles}")
    for a, b, c in mesh.triangles:
        lines.append(f"{a} {b} {c}")
    lines.append(f"boundary {mesh.n_boundary_edges}")
    for k in range(mesh.n_boundary_edges):
        a, b = mesh.boundary_edges[k]
        lines.append(
            f"{a} {b} {mesh.edge_electrode[k]} {_FLOAT_FMT % mesh.edge_midpoint_angle[k]}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read an ``eitmesh v1`` file, validating structure as it parses.

    Raises
    ------
    MeshFormatError
        On any malformed content; the message names the offending line number
        and section.
    """
    with open(path) as fh:
        raw = fh.read().splitlines()

    def fail(lineno: int, section: str, what: str):
        raise MeshFormatError(f"line {lineno}: [{section}] {what}")

    if not raw or raw[0].strip() != "eitmesh v1":
        fail(1, "header", "expected 'eitmesh v1'")
    pos = 1

    def section_header(name: str) -> int:
        nonlocal pos
        if pos >= len(raw):
            fail(pos + 1, name, "unexpected end of file")
        parts = raw[pos].split()
        if len(parts) != 2 or parts[0] != name:
            fail(pos + 1, name, f"expected '{name} <count>', got {raw[pos]!r}")
        try:
            count = int(parts[1])
        except ValueError:
            fail(pos + 1, name, f"bad count {parts[1]!r}")
        if count < 0:
            fail(pos + 1, name, "negative count")
        pos += 1
        return count

    n_nodes = section_header("nodes")
    nodes = np.empty((n_nodes, 2))
    for i in range(n_nodes):
        if pos >= len(raw):
            fail(pos + 1, "nodes", "unexpected end of file")
        parts = raw[pos].split()
        if len(parts) != 2:
            fail(pos + 1, "nodes", f"expected 2 coordinates, got {len(parts)}")
        try:
            nodes[i] = (float(parts[0]), float(parts[1]))
        except ValueError:
            fail(pos + 1, "nodes", f"bad coordinate in {raw[pos]!r}")
        pos += 1

    n_tris = section_header("triangles")
    tris = np.empty((n_tris, 3), dtype=np.int64)
    for i in range(n_tris):
        if pos >= len(raw):
            fail(pos + 1, "triangles", "unexpected end of file")
        parts = raw[pos].split()
        if len(parts) != 3:
            fail(pos + 1, "triangles", f"expected 3 node indices, got {len(parts)}")
        try:
            tris[i] = [int(p) for p in parts]
        except ValueError:
            fail(pos + 1, "triangles", f"bad node index in {raw[pos]!r}")
        if tris[i].min() < 0 or tris[i].max() >= n_nodes:
            fail(pos + 1, "triangles", f"node index out of range in {raw[pos]!r}")
        pos += 1

    n_edges = section_header("boundary")
    edges = np.empty((n_edges, 2), dtype=np.int64)
    elec = np.empty(n_edges, dtype=np.int64)
    mid = np.empty(n_edges)
    for i in range(n_edges):
        if pos >= len(raw):
            fail(pos + 1, "boundary", "unexpected end of file")
        parts = raw[pos].split()
        if len(parts) != 4:
            fail(pos + 1, "boundary", f"expected 'a b electrode midangle', got {raw[pos]!r}")
        try:
            edges[i] = (int(parts[0]), int(parts[1]))
            elec[i] = int(parts[2])
            mid[i] = float(parts[3])
        except ValueError:
            fail(pos + 1, "boundary", f"bad field in {raw[pos]!r}")
        if edges[i].min() < 0 or edges[i].max() >= n_nodes:
            fail(pos + 1, "boundary", f"node index out of range in {raw[pos]!r}")
        if elec[i] < NO_ELECTRODE:
            fail(pos + 1, "boundary", f"bad electrode id {elec[i]}")
        pos += 1

    for extra in range(pos, len(raw)):
        if raw[extra].strip():
            fail(extra + 1, "trailer", f"unexpected content {raw[extra]!r}")

    try:
        mesh = Mesh(nodes, tris, edges, elec, mid)
        mesh.validate()
    except ValueError as exc:
        raise MeshFormatError(f"line {pos}: [validation] {exc}") from exc
    return mesh


def meshes_equal(a: Mesh, b: Mesh) -> bool:
    """Field-for-field exact equality of two meshes."""
    return (
        np.array_equal(a.nodes, b.nodes)
        and np.array_equal(a.triangles, b.triangles)
        and np.array_equal(a.boundary_edges, b.boundary_edges)
        and np.array_equal(a.edge_electrode, b.edge_electrode)
        and np.array_equal(a.edge_midpoint_angle, b.edge_midpoint_angle)
    )
