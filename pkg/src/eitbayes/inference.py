"""Posterior sampling: synthetic data, misfit potential, pCN chains.

The posterior density relative to the prior is proportional to exp(-Phi) with

    Phi(u; y) = (1/2) |Gamma^(-1/2) (G(u) - y)|^2,   Gamma = gamma^2 I.

Chains use the preconditioned Crank-Nicolson proposal on the latent field,

    v = m0 + sqrt(1 - beta^2) (u - m0) + beta xi,   xi ~ N(0, C0),

accepted with probability min{1, exp(Phi(u) - Phi(v))}, plus, for the
star-shaped prior, a Gaussian random-walk move on the inclusion center with
proposals outside the admissible box rejected outright (Metropolis within
Gibbs, one field move and one center move per iteration).

Every iteration draws from its own counter-based rng substream (Philox keyed
by the chain seed, counter = iteration number shifted into the high word), so
a chain resumed from a checkpoint reproduces the uninterrupted run bit for
bit.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .fields import NEUMANN2D, GridField, sample_field, transform_coefficients
from .forward import CEMSystem, SolverError, check_patterns
from .mesh import ElectrodeLayout, Mesh
from .priors import Prior, PriorState, StarPrior, StarState

logger = logging.getLogger(__name__)

MOVE_FIELD = "pcn"
MOVE_CENTER = "rwm"
_MOVE_CODES = {MOVE_FIELD: 0.0, MOVE_CENTER: 1.0}
_MOVE_NAMES = {0.0: MOVE_FIELD, 1.0: MOVE_CENTER}

_CHECKPOINT_MAGIC = "eitchain v1"


@dataclass
class DataSet:
    """Measured voltages with their noise level and stimulation patterns."""

    voltages: np.ndarray
    gamma: float
    patterns: np.ndarray
    mean_relative_error: float | None = None

    def __post_init__(self) -> None:
        self.voltages = np.asarray(self.voltages, dtype=float).ravel()
        self.patterns = np.atleast_2d(np.asarray(self.patterns, dtype=float))
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        L, J = self.patterns.shape
        if self.voltages.size != L * J:
            raise ValueError(
                f"voltage vector has {self.voltages.size} entries, patterns imply {L * J}"
            )


def generate_data(
    mesh: Mesh,
    layout: ElectrodeLayout,
    sigma: np.ndarray,
    patterns: np.ndarray,
    gamma: float,
    rng: np.random.Generator,
) -> DataSet:
    """Simulate noisy voltages y = G(sigma) + eta, eta ~ N(0, gamma^2 I).

    The realized noise level is reported per entry: the mean over measurement
    channels of |eta_i| / |G_i(sigma)|.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    I = check_patterns(patterns, layout.n_electrodes)
    g = CEMSystem(mesh, layout).forward(sigma, I)
    noise = gamma * rng.standard_normal(g.size)
    realized = float(np.mean(np.abs(noise) / np.abs(g)))
    return DataSet(g + noise, gamma, I, realized)


def potential(g: np.ndarray, data: DataSet) -> float:
    """Data misfit Phi = (1/2) |(g - y) / gamma|^2 of a forward vector g."""
    r = (np.asarray(g, dtype=float) - data.voltages) / data.gamma
    return 0.5 * float(r @ r)


class PotentialEvaluator:
    """Phi(state) on a fixed inversion mesh, caching the assembled geometry.

    With ``data=None`` the likelihood is flat (Phi identically zero), which
    runs the chain under the prior alone; no forward solves happen then.
    """

    def __init__(self, prior: Prior, mesh: Mesh, layout: ElectrodeLayout, data: DataSet | None):
        self.prior = prior
        self.mesh = mesh
        self.layout = layout
        self.data = data
        self.system = CEMSystem(mesh, layout)
        if data is not None:
            self.patterns = check_patterns(data.patterns, layout.n_electrodes)

    def conductivity(self, state: PriorState) -> np.ndarray:
        return self.prior.conductivity(state, self.mesh)

    def phi_of_sigma(self, sigma: np.ndarray) -> float:
        """Misfit of a bare per-triangle conductivity vector."""
        if self.data is None:
            return 0.0
        try:
            g = self.system.forward(sigma, self.patterns)
        except SolverError as exc:
            logger.warning("forward solve failed; treating potential as +inf: %s", exc)
            return math.inf
        return potential(g, self.data)

    def phi_and_sigma(self, state: PriorState) -> tuple[float, np.ndarray]:
        sigma = self.conductivity(state)
        return self.phi_of_sigma(sigma), sigma

    def __call__(self, state: PriorState) -> float:
        return self.phi_and_sigma(state)[0]


def pcn_propose(field: GridField, spec, beta: float, rng: np.random.Generator) -> GridField:
    """Crank-Nicolson proposal around the field's mean offset."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    xi = sample_field(spec, 0.0, rng)
    m0 = field.mean_offset
    values = m0 + math.sqrt(1.0 - beta**2) * (field.values - m0) + beta * xi.values
    return GridField(field.boundary, values, m0)


def metropolis_accept(phi_current: float, phi_proposed: float, rng: np.random.Generator) -> bool:
    """Accept with probability min{1, exp(phi_current - phi_proposed)}."""
    # +inf proposals never pass; an +inf current state always escapes
    return math.log(rng.uniform()) < phi_current - phi_proposed


def rwm_center_propose(center: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Random-walk center proposal x0 + delta * zeta, zeta ~ N(0, I)."""
    return center + delta * rng.standard_normal(2)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """The counter-based substream owned by one iteration (-1 = initial draw)."""
    return np.random.Generator(np.random.Philox(key=seed, counter=(iteration + 1) << 64))


@dataclass(frozen=True)
class ChainConfig:
    """Chain length, proposal sizes and bookkeeping intervals."""

    n_samples: int
    burn_in: int
    beta: float
    delta: float = 0.0
    seed: int = 0
    thin: int = 100
    checkpoint_every: int = 0
    monitors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not 0 <= self.burn_in < self.n_samples:
            raise ValueError(f"burn_in must lie in [0, n_samples), got {self.burn_in}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        object.__setattr__(self, "monitors", tuple(self.monitors))
        for token in self.monitors:
            _parse_monitor(token)


def _parse_monitor(token: str):
    """Validate a monitor token, returning a structured form."""
    if token == "phi":
        raise ValueError("phi has its own trace column; do not list it as a monitor")
    if token in ("center:x", "center:y"):
        return ("center", 0 if token.endswith("x") else 1)
    if token.startswith("mode:"):
        parts = token[len("mode:") :].split(",")
        try:
            idx = tuple(int(p) for p in parts)
        except ValueError:
            raise ValueError(f"bad monitor token {token!r}") from None
        if len(idx) not in (1, 2) or any(i < 0 for i in idx):
            raise ValueError(f"bad monitor token {token!r}")
        return ("mode", idx)
    raise ValueError(f"unknown monitor token {token!r}")


def _state_field(state: PriorState) -> GridField:
    return state.radius_raw if isinstance(state, StarState) else state.field


def _with_field(state: PriorState, field: GridField) -> PriorState:
    if isinstance(state, StarState):
        return StarState(field, state.center)
    return replace(state, field=field)


class _MonitorSet:
    def __init__(self, prior: Prior, tokens: tuple[str, ...]):
        self.parsed = [_parse_monitor(t) for t in tokens]
        self.tokens = tokens
        n = prior.spec.grid_size
        for kind, idx in self.parsed:
            if kind == "mode":
                want = 2 if prior.spec.boundary == NEUMANN2D else 1
                if len(idx) != want:
                    raise ValueError(f"monitor mode index must have {want} component(s)")
                bound = n if want == 2 else n + 1  # sine modes are 1-based
                lo_ok = all(i >= (0 if want == 2 else 1) for i in idx)
                if not lo_ok or any(i >= bound for i in idx):
                    raise ValueError(f"monitor mode {idx} outside the grid's mode range")
            elif kind == "center" and not isinstance(prior, StarPrior):
                raise ValueError("center monitors need the star prior")

    def values(self, state: PriorState) -> list[float]:
        if not self.parsed:
            return []
        out = []
        coeffs = None
        field = _state_field(state)
        for kind, idx in self.parsed:
            if kind == "center":
                out.append(float(state.center[idx]))
            else:
                if coeffs is None:
                    coeffs = transform_coefficients(
                        field.boundary, field.values - field.mean_offset
                    )
                if len(idx) == 2:
                    out.append(float(coeffs[idx[0], idx[1]]))
                else:
                    out.append(float(coeffs[idx[0] - 1]))
        return out


@dataclass
class ChainRecord:
    """Everything a finished (or checkpointed) chain knows."""

    config: ChainConfig
    family: str
    columns: tuple[str, ...]
    trace: np.ndarray  # (rows, len(columns)) float64
    accept_counts: dict[str, tuple[int, int]]  # move -> (accepted, proposed)
    state_sum: np.ndarray
    center_sum: np.ndarray | None
    sigma_sum: np.ndarray
    n_accumulated: int
    snapshots: list[tuple[int, np.ndarray, np.ndarray | None]]
    final_state: PriorState
    final_phi: float

    def acceptance_rate(self, move: str) -> float:
        acc, prop = self.accept_counts.get(move, (0, 0))
        return acc / prop if prop else math.nan

    def trace_column(self, name: str) -> np.ndarray:
        return self.trace[:, self.columns.index(name)]


@dataclass
class MeanSummary:
    """The two posterior means: push-forward of the mean state, and mean push-forward."""

    mean_state: PriorState
    sigma_of_mean_state: np.ndarray  # F(E[u])
    mean_sigma: np.ndarray  # E[F(u)]


def mean_conductivities(record: ChainRecord, prior: Prior, mesh: Mesh) -> MeanSummary:
    """Compute F(E[u]) and E[F(u)] from a chain's accumulators."""
    if record.n_accumulated < 1:
        raise ValueError("chain accumulated no post-burn-in states")
    mean_values = record.state_sum / record.n_accumulated
    field = GridField(_state_field(record.final_state).boundary, mean_values, prior.mean)
    if record.center_sum is not None:
        mean_state: PriorState = StarState(field, record.center_sum / record.n_accumulated)
    else:
        mean_state = _with_field(record.final_state, field)
    return MeanSummary(
        mean_state=mean_state,
        sigma_of_mean_state=prior.conductivity(mean_state, mesh),
        mean_sigma=record.sigma_sum / record.n_accumulated,
    )


class _ChainState:
    """Mutable engine state, serializable to the checkpoint format."""

    def __init__(self, prior: Prior, evaluator: PotentialEvaluator, config: ChainConfig):
        self.prior = prior
        self.evaluator = evaluator
        self.config = config
        self.is_star = isinstance(prior, StarPrior)
        self.monitors = _MonitorSet(prior, config.monitors)
        self.columns = ("iteration", "move", "accepted", "phi") + config.monitors
        moves = 2 if self.is_star else 1
        self.trace = np.empty((config.n_samples * moves, len(self.columns)))
        self.rows = 0
        self.iteration = 0
        self.accepted = {MOVE_FIELD: 0, MOVE_CENTER: 0}
        self.proposed = {MOVE_FIELD: 0, MOVE_CENTER: 0}
        n_tri = evaluator.mesh.n_triangles
        grid_shape = (
            (prior.spec.grid_size, prior.spec.grid_size)
            if prior.spec.boundary == NEUMANN2D
            else (prior.spec.grid_size,)
        )
        self.state_sum = np.zeros(grid_shape)
        self.center_sum = np.zeros(2) if self.is_star else None
        self.sigma_sum = np.zeros(n_tri)
        self.n_accumulated = 0
        self.snapshots: list[tuple[int, np.ndarray, np.ndarray | None]] = []
        self.state: PriorState | None = None
        self.phi = math.inf
        self.sigma: np.ndarray | None = None

    def initialize(self) -> None:
        rng = iteration_rng(self.config.seed, -1)
        self.state = self.prior.sample(rng)
        self.phi, self.sigma = self.evaluator.phi_and_sigma(self.state)

    def record_row(self, move: str, accepted: bool) -> None:
        row = [float(self.iteration), _MOVE_CODES[move], float(accepted), self.phi]
        row.extend(self.monitors.values(self.state))
        self.trace[self.rows] = row
        self.rows += 1
        self.proposed[move] += 1
        if accepted:
            self.accepted[move] += 1

    def step(self) -> None:
        cfg = self.config
        rng = iteration_rng(cfg.seed, self.iteration)

        field = _state_field(self.state)
        prop_field = pcn_propose(field, self.prior.spec, cfg.beta, rng)
        candidate = _with_field(self.state, prop_field)
        phi_p, sigma_p = self.evaluator.phi_and_sigma(candidate)
        if metropolis_accept(self.phi, phi_p, rng):
            self.state, self.phi, self.sigma = candidate, phi_p, sigma_p
            self.record_row(MOVE_FIELD, True)
        else:
            self.record_row(MOVE_FIELD, False)

        if self.is_star:
            center_p = rwm_center_propose(self.state.center, cfg.delta, rng)
            if self.prior.center_legal(center_p):
                candidate = StarState(self.state.radius_raw, center_p)
                phi_p, sigma_p = self.evaluator.phi_and_sigma(candidate)
                if metropolis_accept(self.phi, phi_p, rng):
                    self.state, self.phi, self.sigma = candidate, phi_p, sigma_p
                    self.record_row(MOVE_CENTER, True)
                else:
                    self.record_row(MOVE_CENTER, False)
            else:
                # outside the admissible box: rejected without evaluation
                self.record_row(MOVE_CENTER, False)

        if self.iteration >= cfg.burn_in:
            self.state_sum += _state_field(self.state).values
            if self.is_star:
                self.center_sum += self.state.center
            self.sigma_sum += self.sigma
            self.n_accumulated += 1
            if (self.iteration - cfg.burn_in) % cfg.thin == 0:
                center = self.state.center.copy() if self.is_star else None
                self.snapshots.append(
                    (self.iteration, _state_field(self.state).values.copy(), center)
                )
        self.iteration += 1

    def to_record(self) -> ChainRecord:
        return ChainRecord(
            config=self.config,
            family=self.prior.family,
            columns=self.columns,
            trace=self.trace[: self.rows].copy(),
            accept_counts={
                m: (self.accepted[m], self.proposed[m])
                for m in (MOVE_FIELD, MOVE_CENTER)
                if self.proposed[m]
            },
            state_sum=self.state_sum.copy(),
            center_sum=None if self.center_sum is None else self.center_sum.copy(),
            sigma_sum=self.sigma_sum.copy(),
            n_accumulated=self.n_accumulated,
            snapshots=[(i, v.copy(), None if c is None else c.copy()) for i, v, c in self.snapshots],
            final_state=self.state,
            final_phi=self.phi,
        )

    # --- checkpointing -----------------------------------------------------

    def _config_line(self) -> str:
        c = self.config
        fields = [c.n_samples, c.burn_in, c.beta, c.delta, c.seed, c.thin, c.checkpoint_every]
        return " ".join("%.17g" % float(v) for v in fields) + " " + ",".join(c.monitors)

    def write_checkpoint(self, path) -> None:
        field = _state_field(self.state)
        n_field = field.values.size
        has_center = 1 if self.is_star else 0
        header = (
            f"{_CHECKPOINT_MAGIC} {self.prior.family} {n_field} {has_center} "
            f"{self.sigma_sum.size} {len(self.config.monitors)} {self.rows} "
            f"{len(self.snapshots)} {self.iteration} {self.n_accumulated}\n"
        )
        blocks = [
            np.array(
                [
                    self.phi,
                    self.accepted[MOVE_FIELD],
                    self.proposed[MOVE_FIELD],
                    self.accepted[MOVE_CENTER],
                    self.proposed[MOVE_CENTER],
                ]
            ),
            field.values.ravel(),
        ]
        if self.is_star:
            blocks.append(self.state.center)
        blocks.append(self.state_sum.ravel())
        if self.is_star:
            blocks.append(self.center_sum)
        blocks.append(self.sigma_sum)
        blocks.append(self.trace[: self.rows].ravel())
        for it, values, center in self.snapshots:
            blocks.append(np.array([float(it)]))
            blocks.append(values.ravel())
            if center is not None:
                blocks.append(center)
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write((self._config_line() + "\n").encode("ascii"))
            for b in blocks:
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        os.replace(tmp, path)

    def load_checkpoint(self, path) -> None:
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii").strip()
            config_line = fh.readline().decode("ascii").strip()
            payload = np.frombuffer(fh.read(), dtype="<f8")
        parts = header.split()
        if len(parts) != 11 or " ".join(parts[:2]) != _CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint header: {header!r}")
        family = parts[2]
        n_field, has_center, n_tri, n_mon, rows, n_snap, iteration, n_acc = (
            int(p) for p in parts[3:]
        )
        if family != self.prior.family:
            raise ValueError(f"checkpoint is for prior family {family!r}, not {self.prior.family!r}")
        if config_line != self._config_line():
            raise ValueError("checkpoint was written under a different chain configuration")
        grid_shape = self.state_sum.shape
        if n_field != self.state_sum.size or n_tri != self.sigma_sum.size:
            raise ValueError("checkpoint sizes do not match this prior/mesh")
        if bool(has_center) != self.is_star:
            raise ValueError("checkpoint center flag does not match the prior")
        pos = 0

        def take(count: int) -> np.ndarray:
            nonlocal pos
            if pos + count > payload.size:
                raise ValueError("checkpoint payload truncated")
            out = payload[pos : pos + count]
            pos += count
            return np.array(out)

        counters = take(5)
        self.phi = float(counters[0])
        self.accepted[MOVE_FIELD] = int(counters[1])
        self.proposed[MOVE_FIELD] = int(counters[2])
        self.accepted[MOVE_CENTER] = int(counters[3])
        self.proposed[MOVE_CENTER] = int(counters[4])
        values = take(n_field).reshape(grid_shape)
        field = GridField(self.prior.spec.boundary, values, self.prior.mean)
        if self.is_star:
            center = take(2)
            self.state = StarState(field, center)
        else:
            template = self.prior.mean_state()
            self.state = _with_field(template, field)
        self.state_sum = take(n_field).reshape(grid_shape)
        if self.is_star:
            self.center_sum = take(2)
        self.sigma_sum = take(n_tri)
        n_cols = len(self.columns)
        self.trace[:rows] = take(rows * n_cols).reshape(rows, n_cols)
        self.rows = rows
        self.snapshots = []
        for _ in range(n_snap):
            it = int(take(1)[0])
            vals = take(n_field).reshape(grid_shape)
            center = take(2) if self.is_star else None
            self.snapshots.append((it, vals, center))
        if pos != payload.size:
            raise ValueError("checkpoint payload has trailing data")
        self.iteration = iteration
        self.n_accumulated = n_acc
        self.sigma = self.evaluator.conductivity(self.state)


def run_chain(
    prior: Prior,
    evaluator: PotentialEvaluator,
    config: ChainConfig,
    checkpoint_path=None,
    resume: bool = False,
) -> ChainRecord:
    """Run (or resume) one chain to completion and return its record.

    With ``checkpoint_every`` set and a ``checkpoint_path``, a restartable
    checkpoint is written atomically every that many iterations; passing
    ``resume=True`` with an existing checkpoint continues it, reproducing the
    uninterrupted chain exactly.
    """
    if isinstance(prior, StarPrior) and config.delta == 0.0:
        raise ValueError("the star prior needs a positive center step delta")
    chain = _ChainState(prior, evaluator, config)
    if resume:
        if checkpoint_path is None or not os.path.exists(checkpoint_path):
            raise FileNotFoundError("resume requested but no checkpoint found")
        chain.load_checkpoint(checkpoint_path)
    else:
        chain.initialize()
    while chain.iteration < config.n_samples:
        chain.step()
        if (
            config.checkpoint_every
            and checkpoint_path is not None
            and chain.iteration % config.checkpoint_every == 0
            and chain.iteration < config.n_samples
        ):
            chain.write_checkpoint(checkpoint_path)
    return chain.to_record()


def trace_to_csv(path, record: ChainRecord) -> None:
    """Write the trace as CSV: iteration, move type, accepted, phi, monitors."""
    # csv quoting keeps monitor names with embedded commas (e.g. mode:1,1) intact
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(record.columns)
        for row in record.trace:
            cells = [
                "%d" % int(row[0]),
                _MOVE_NAMES[row[1]],
                "%d" % int(row[2]),
            ]
            cells += ["%.17g" % v for v in row[3:]]
            writer.writerow(cells)


def trace_from_csv(path) -> tuple[tuple[str, ...], np.ndarray]:
    """Read a trace CSV back into (column names, float array)."""
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        columns = tuple(next(reader, ()))
        if columns[:4] != ("iteration", "move", "accepted", "phi"):
            raise ValueError(f"not a trace CSV: header {columns!r}")
        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != len(columns):
                raise ValueError(f"line {lineno}: expected {len(columns)} cells")
            if cells[1] not in _MOVE_CODES:
                raise ValueError(f"line {lineno}: unknown move type {cells[1]!r}")
            rows.append(
                [float(cells[0]), _MOVE_CODES[cells[1]], float(cells[2])]
                + [float(v) for v in cells[3:]]
            )
    return columns, np.array(rows, dtype=float).reshape(len(rows), len(columns))


_SNAPSHOT_MAGIC = "eitsnap v1"


def write_snapshots(path, record: ChainRecord, boundary: str, grid_size: int) -> None:
    """Store a record's thinned post-burn-in states as a binary artifact."""
    has_center = 1 if record.center_sum is not None else 0
    header = (
        f"{_SNAPSHOT_MAGIC} {record.family} {boundary} {grid_size} "
        f"{has_center} {len(record.snapshots)}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for it, values, center in record.snapshots:
            fh.write(np.ascontiguousarray([float(it)], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(values.ravel(), dtype="<f8").tobytes())
            if has_center:
                fh.write(np.ascontiguousarray(center, dtype="<f8").tobytes())


def read_snapshots(path) -> tuple[str, list[tuple[int, np.ndarray, np.ndarray | None]]]:
    """Read a snapshot artifact back as (family, [(iteration, values, center)])."""
    from .fields import NEUMANN2D as _N2

    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        payload = np.frombuffer(fh.read(), dtype="<f8")
    parts = header.split()
    if len(parts) != 7 or " ".join(parts[:2]) != _SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot header: {header!r}")
    family, boundary = parts[2], parts[3]
    grid_size, has_center, count = int(parts[4]), int(parts[5]), int(parts[6])
    shape = (grid_size, grid_size) if boundary == _N2 else (grid_size,)
    n_field = int(np.prod(shape))
    step = 1 + n_field + 2 * has_center
    if payload.size != count * step:
        raise ValueError("snapshot payload size does not match its header")
    out = []
    for k in range(count):
        block = payload[k * step : (k + 1) * step]
        it = int(block[0])
        values = np.array(block[1 : 1 + n_field]).reshape(shape)
        center = np.array(block[1 + n_field :]) if has_center else None
        out.append((it, values, center))
    return family, out
