"""Run configuration: a strict JSON schema with canonical hashing.

A run config fixes everything an experiment needs: the two mesh refinement
levels (data on the fine mesh, inversion on the coarse one), electrode
geometry, stimulation amplitude, noise level, the ground-truth conductivity,
the prior, and the chain settings. Unknown keys anywhere are errors, so a
config cannot silently carry typos.

The config hash is the SHA-256 of the canonical JSON form (sorted keys,
minimal separators) of every section except ``output_dir`` and the seeds;
artifacts written under different hashes never mix. Seeds pick a realization
of the same experiment, so each pipeline stage records the seed it actually
used instead of baking seeds into the hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .fields import DIRICHLET1D, NEUMANN2D, CovarianceSpec
from .mesh import ElectrodeLayout
from .priors import (
    LEVEL_SET,
    LOG_GAUSSIAN,
    STAR,
    LevelSetPrior,
    LogGaussianPrior,
    Prior,
    StarPrior,
)

STAR_DRAW = "star_draw"
DISKS = "disks"


class ConfigError(ValueError):
    """Raised for malformed, incomplete, or inconsistent run configs."""


def _check_keys(section: str, data: dict, allowed: set[str], required: set[str]) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")
    missing = required - set(data)
    if missing:
        raise ConfigError(f"{section}: missing key(s) {sorted(missing)}")


def _number(section: str, data: dict, key: str, default=None) -> float:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
    return float(value)


def _integer(section: str, data: dict, key: str, default=None) -> int:
    value = data.get(key, default)
    if isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
    if isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        value = int(value)
    if not isinstance(value, int):
        raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
    return value


@dataclass(frozen=True)
class MeshSettings:
    coarse_level: int
    fine_level: int
    n_electrodes: int
    coverage: float
    contact_impedance: float


@dataclass(frozen=True)
class StimulationSettings:
    amplitude: float


@dataclass(frozen=True)
class NoiseSettings:
    gamma: float
    seed: int


@dataclass(frozen=True)
class DiskSpec:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class TruthSettings:
    """Either a seeded star-prior draw or explicit disk inclusions."""

    kind: str
    seed: int = 0
    star: "PriorSettings | None" = None
    disks: tuple[DiskSpec, ...] = ()
    background: float = 1.0
    value: float = 2.0


@dataclass(frozen=True)
class PriorSettings:
    family: str
    grid_size: int
    q: float
    tau: float
    alpha: float
    mean: float
    u_plus: float = 2.0
    u_minus: float = 1.0
    center_halfwidth: float = 0.5
    thresholds: tuple[float, ...] = ()
    phases: tuple[float, ...] = ()


@dataclass(frozen=True)
class ChainSettings:
    n_samples: int
    burn_in: int
    beta: float
    delta: float
    seed: int
    thin: int
    checkpoint_every: int
    monitors: tuple[str, ...]


@dataclass(frozen=True)
class ReportSettings:
    raster_resolution: int = 256
    kde_points: int = 101
    sample_rasters: int = 3


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    mesh: MeshSettings
    stimulation: StimulationSettings
    noise: NoiseSettings
    truth: TruthSettings
    prior: PriorSettings
    chain: ChainSettings
    report: ReportSettings


_PRIOR_COMMON = {"family", "grid_size", "q", "tau", "alpha", "mean"}
_PRIOR_KEYS = {
    LOG_GAUSSIAN: _PRIOR_COMMON,
    STAR: _PRIOR_COMMON | {"u_plus", "u_minus", "center_halfwidth"},
    LEVEL_SET: _PRIOR_COMMON | {"thresholds", "phases"},
}


def _parse_prior(section: str, data: dict) -> PriorSettings:
    _check_keys(section, data, set().union(*_PRIOR_KEYS.values()), {"family"})
    family = data["family"]
    if family not in _PRIOR_KEYS:
        raise ConfigError(f"{section}.family: unknown prior family {family!r}")
    _check_keys(section, data, _PRIOR_KEYS[family], _PRIOR_COMMON)
    kwargs = dict(
        family=family,
        grid_size=_integer(section, data, "grid_size"),
        q=_number(section, data, "q"),
        tau=_number(section, data, "tau"),
        alpha=_number(section, data, "alpha"),
        mean=_number(section, data, "mean"),
    )
    if family == STAR:
        kwargs["u_plus"] = _number(section, data, "u_plus", 2.0)
        kwargs["u_minus"] = _number(section, data, "u_minus", 1.0)
        kwargs["center_halfwidth"] = _number(section, data, "center_halfwidth", 0.5)
    if family == LEVEL_SET:
        for key in ("thresholds", "phases"):
            seq = data.get(key)
            if not isinstance(seq, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in seq
            ):
                raise ConfigError(f"{section}.{key}: expected a list of numbers")
        kwargs["thresholds"] = tuple(float(v) for v in data.get("thresholds", []))
        kwargs["phases"] = tuple(float(v) for v in data.get("phases", []))
    return PriorSettings(**kwargs)


def _parse_truth(data: dict) -> TruthSettings:
    _check_keys("truth", data, {"kind", "seed", "star", "disks", "background", "value"}, {"kind"})
    kind = data["kind"]
    if kind == STAR_DRAW:
        _check_keys("truth", data, {"kind", "seed", "star"}, {"kind", "seed", "star"})
        star = _parse_prior("truth.star", data["star"])
        if star.family != STAR:
            raise ConfigError("truth.star: a star_draw truth needs a star prior")
        return TruthSettings(kind=kind, seed=_integer("truth", data, "seed"), star=star)
    if kind == DISKS:
        _check_keys("truth", data, {"kind", "disks", "background", "value"}, {"kind", "disks"})
        raw = data["disks"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("truth.disks: expected a non-empty list")
        disks = []
        for i, entry in enumerate(raw):
            section = f"truth.disks[{i}]"
            _check_keys(section, entry, {"center", "radius"}, {"center", "radius"})
            center = entry["center"]
            if not isinstance(center, list) or len(center) != 2:
                raise ConfigError(f"{section}.center: expected [x, y]")
            radius = _number(section, entry, "radius")
            if radius <= 0:
                raise ConfigError(f"{section}.radius: must be positive")
            disks.append(DiskSpec(center=(float(center[0]), float(center[1])), radius=radius))
        background = _number("truth", data, "background", 1.0)
        value = _number("truth", data, "value", 2.0)
        if background <= 0 or value <= 0:
            raise ConfigError("truth: conductivity values must be positive")
        return TruthSettings(kind=kind, disks=tuple(disks), background=background, value=value)
    raise ConfigError(f"truth.kind: unknown kind {kind!r} (use {STAR_DRAW!r} or {DISKS!r})")


def parse_config(data: dict, allow_inverse_crime: bool = False) -> RunConfig:
    """Validate a parsed JSON object into a RunConfig."""
    _check_keys(
        "config",
        data,
        {"output_dir", "mesh", "stimulation", "noise", "truth", "prior", "chain", "report"},
        {"output_dir", "mesh", "stimulation", "noise", "truth", "prior", "chain"},
    )
    if not isinstance(data["output_dir"], str) or not data["output_dir"]:
        raise ConfigError("output_dir: expected a non-empty string")

    m = data["mesh"]
    _check_keys(
        "mesh",
        m,
        {"coarse_level", "fine_level", "n_electrodes", "coverage", "contact_impedance"},
        {"coarse_level", "fine_level", "n_electrodes", "coverage", "contact_impedance"},
    )
    mesh = MeshSettings(
        coarse_level=_integer("mesh", m, "coarse_level"),
        fine_level=_integer("mesh", m, "fine_level"),
        n_electrodes=_integer("mesh", m, "n_electrodes"),
        coverage=_number("mesh", m, "coverage"),
        contact_impedance=_number("mesh", m, "contact_impedance"),
    )
    if mesh.coarse_level < 0 or mesh.fine_level < 0:
        raise ConfigError("mesh: refinement levels must be non-negative")
    if mesh.fine_level < mesh.coarse_level:
        raise ConfigError("mesh: fine_level must not be below coarse_level")
    if mesh.fine_level == mesh.coarse_level and not allow_inverse_crime:
        raise ConfigError(
            "mesh: fine_level equals coarse_level; generating data and inverting on "
            "the same mesh is an inverse crime (pass --allow-inverse-crime to permit)"
        )

    s = data["stimulation"]
    _check_keys("stimulation", s, {"amplitude"}, {"amplitude"})
    stimulation = StimulationSettings(amplitude=_number("stimulation", s, "amplitude"))
    if stimulation.amplitude <= 0:
        raise ConfigError("stimulation.amplitude: must be positive")

    n = data["noise"]
    _check_keys("noise", n, {"gamma", "seed"}, {"gamma", "seed"})
    noise = NoiseSettings(gamma=_number("noise", n, "gamma"), seed=_integer("noise", n, "seed"))
    if noise.gamma <= 0:
        raise ConfigError("noise.gamma: must be positive")

    truth = _parse_truth(data["truth"])
    prior = _parse_prior("prior", data["prior"])

    c = data["chain"]
    _check_keys(
        "chain",
        c,
        {"n_samples", "burn_in", "beta", "delta", "seed", "thin", "checkpoint_every", "monitors"},
        {"n_samples", "burn_in", "beta", "seed"},
    )
    monitors = c.get("monitors", [])
    if not isinstance(monitors, list) or not all(isinstance(t, str) for t in monitors):
        raise ConfigError("chain.monitors: expected a list of strings")
    chain = ChainSettings(
        n_samples=_integer("chain", c, "n_samples"),
        burn_in=_integer("chain", c, "burn_in"),
        beta=_number("chain", c, "beta"),
        delta=_number("chain", c, "delta", 0.0),
        seed=_integer("chain", c, "seed"),
        thin=_integer("chain", c, "thin", 100),
        checkpoint_every=_integer("chain", c, "checkpoint_every", 0),
        monitors=tuple(monitors),
    )

    r = data.get("report", {})
    _check_keys("report", r, {"raster_resolution", "kde_points", "sample_rasters"}, set())
    report = ReportSettings(
        raster_resolution=_integer("report", r, "raster_resolution", 256),
        kde_points=_integer("report", r, "kde_points", 101),
        sample_rasters=_integer("report", r, "sample_rasters", 3),
    )
    if report.raster_resolution < 2 or report.kde_points < 2 or report.sample_rasters < 0:
        raise ConfigError("report: raster/kde sizes out of range")

    config = RunConfig(
        output_dir=data["output_dir"],
        mesh=mesh,
        stimulation=stimulation,
        noise=noise,
        truth=truth,
        prior=prior,
        chain=chain,
        report=report,
    )
    # constructing the heavyweight objects validates the numeric ranges early
    electrode_layout(config)
    build_prior(config.prior)
    if truth.kind == STAR_DRAW:
        build_prior(truth.star)
    return config


def load_config(path, allow_inverse_crime: bool = False) -> RunConfig:
    """Load and validate a JSON run config from disk."""
    try:
        with open(path, "r") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(data, allow_inverse_crime=allow_inverse_crime)


def _as_dict(config: RunConfig) -> dict:
    truth: dict = {"kind": config.truth.kind}
    if config.truth.kind == STAR_DRAW:
        truth["star"] = _prior_dict(config.truth.star)
    else:
        truth["disks"] = [
            {"center": list(d.center), "radius": d.radius} for d in config.truth.disks
        ]
        truth["background"] = config.truth.background
        truth["value"] = config.truth.value
    return {
        "mesh": {
            "coarse_level": config.mesh.coarse_level,
            "fine_level": config.mesh.fine_level,
            "n_electrodes": config.mesh.n_electrodes,
            "coverage": config.mesh.coverage,
            "contact_impedance": config.mesh.contact_impedance,
        },
        "stimulation": {"amplitude": config.stimulation.amplitude},
        "noise": {"gamma": config.noise.gamma},
        "truth": truth,
        "prior": _prior_dict(config.prior),
        "chain": {
            "n_samples": config.chain.n_samples,
            "burn_in": config.chain.burn_in,
            "beta": config.chain.beta,
            "delta": config.chain.delta,
            "thin": config.chain.thin,
            "checkpoint_every": config.chain.checkpoint_every,
            "monitors": list(config.chain.monitors),
        },
        "report": {
            "raster_resolution": config.report.raster_resolution,
            "kde_points": config.report.kde_points,
            "sample_rasters": config.report.sample_rasters,
        },
    }


def _prior_dict(prior: PriorSettings) -> dict:
    out = {
        "family": prior.family,
        "grid_size": prior.grid_size,
        "q": prior.q,
        "tau": prior.tau,
        "alpha": prior.alpha,
        "mean": prior.mean,
    }
    if prior.family == STAR:
        out["u_plus"] = prior.u_plus
        out["u_minus"] = prior.u_minus
        out["center_halfwidth"] = prior.center_halfwidth
    if prior.family == LEVEL_SET:
        out["thresholds"] = list(prior.thresholds)
        out["phases"] = list(prior.phases)
    return out


# Seeds and output_dir are deliberately left out of the hash: they label a
# realization, not the experiment, and every stage records the seed it used
# in its own manifest entry.
def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical config JSON (output_dir excluded)."""
    canonical = json.dumps(_as_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()


def electrode_layout(config: RunConfig) -> ElectrodeLayout:
    return ElectrodeLayout(
        n_electrodes=config.mesh.n_electrodes,
        coverage=config.mesh.coverage,
        contact_impedance=config.mesh.contact_impedance,
    )


def build_prior(settings: PriorSettings) -> Prior:
    """Construct the prior object a settings block describes."""
    boundary = DIRICHLET1D if settings.family == STAR else NEUMANN2D
    try:
        spec = CovarianceSpec(
            q=settings.q,
            tau=settings.tau,
            alpha=settings.alpha,
            boundary=boundary,
            grid_size=settings.grid_size,
        )
        if settings.family == LOG_GAUSSIAN:
            return LogGaussianPrior(spec=spec, mean=settings.mean)
        if settings.family == STAR:
            return StarPrior(
                spec=spec,
                mean=settings.mean,
                u_plus=settings.u_plus,
                u_minus=settings.u_minus,
                center_halfwidth=settings.center_halfwidth,
            )
        return LevelSetPrior(
            spec=spec,
            mean=settings.mean,
            thresholds=settings.thresholds,
            phases=settings.phases,
        )
    except ValueError as exc:
        raise ConfigError(f"prior: {exc}") from exc
