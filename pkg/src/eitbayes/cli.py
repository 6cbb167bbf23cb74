"""Command-line pipeline: mesh, truth, data, chains, diagnostics, report.

Every stage reads the same JSON config, writes its artifacts into the run's
output directory, and records itself in ``manifest.json`` together with the
config hash and package version. A stage refuses to build on artifacts left
by a different config (exit code 4) unless ``--force`` is given. With fixed
seeds the whole pipeline is deterministic: rerunning a stage rewrites its
artifacts byte for byte.

Exit codes: 0 success, 2 config or usage error, 3 numerical failure,
4 stale manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    DISKS,
    STAR_DRAW,
    ConfigError,
    RunConfig,
    build_prior,
    config_hash,
    electrode_layout,
    load_config,
)
from .diagnostics import (
    ess_table_from_trace,
    format_table_text,
    iteration_series,
    kde_1d,
    kde_2d,
    misfit_report,
    render_conductivity_ppm,
    thin_to_ess,
    write_density_csv,
    write_table_csv,
)
from .fields import GridField, read_field, write_field
from .forward import (
    AdmissibilityError,
    ChargeConservationError,
    SolverError,
    adjacent_stimulation_patterns,
    read_matrix_csv,
    write_matrix_csv,
)
from .inference import (
    ChainConfig,
    DataSet,
    MeanSummary,
    PotentialEvaluator,
    generate_data,
    mean_conductivities,
    read_snapshots,
    run_chain,
    trace_from_csv,
    trace_to_csv,
    write_snapshots,
)
from .mesh import MeshFormatError, build_disk_mesh, read_mesh, write_mesh
from .priors import STAR, StarState

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_STAGES = ("mesh", "make-truth", "make-data", "run", "diagnose", "report")


class StaleManifestError(RuntimeError):
    """Raised when a directory's manifest belongs to a different config."""


# --- manifest plumbing -------------------------------------------------------


def _manifest_path(out: Path) -> Path:
    return out / MANIFEST_NAME


def _load_manifest(out: Path) -> dict | None:
    path = _manifest_path(out)
    if not path.exists():
        return None
    with open(path, "r") as fh:
        return json.load(fh)


def _open_manifest(out: Path, cfg_hash: str, force: bool) -> dict:
    manifest = _load_manifest(out)
    if manifest is None:
        return {"config_sha256": cfg_hash, "code_version": __version__, "stages": {}}
    if manifest.get("config_sha256") != cfg_hash:
        if not force:
            raise StaleManifestError(
                f"{out}: manifest was written under config "
                f"{manifest.get('config_sha256', '?')[:12]}..., current config is "
                f"{cfg_hash[:12]}...; pass --force to overwrite"
            )
        manifest["config_sha256"] = cfg_hash
    manifest["code_version"] = __version__
    manifest.setdefault("stages", {})
    return manifest


def _write_manifest(out: Path, manifest: dict) -> None:
    with open(_manifest_path(out), "w", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _invalidate_downstream(manifest: dict, stage: str) -> None:
    """Rerunning a stage orphans everything later in the pipeline."""
    for later in _STAGES[_STAGES.index(stage) + 1 :]:
        manifest["stages"].pop(later, None)


def _require_stages(manifest: dict, out: Path, *stages: str) -> None:
    for stage in stages:
        entry = manifest["stages"].get(stage)
        if entry is None:
            raise ConfigError(f"stage '{stage}' has not run yet in {out}; run `eit {stage}` first")
        for name in entry.get("artifacts", []):
            if not (out / name).exists():
                raise ConfigError(f"artifact {name} from stage '{stage}' is missing in {out}")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# --- truth construction ------------------------------------------------------


def _truth_sigma(config: RunConfig, mesh) -> tuple[np.ndarray, dict]:
    """Ground-truth conductivity on the fine mesh plus its provenance record."""
    truth = config.truth
    if truth.kind == STAR_DRAW:
        prior = build_prior(truth.star)
        state = prior.sample(np.random.default_rng(truth.seed))
        sigma = prior.conductivity(state, mesh)
        meta = {
            "kind": STAR_DRAW,
            "seed": truth.seed,
            "center": [float(state.center[0]), float(state.center[1])],
            "radius_field": "truth_radius.field",
        }
        return sigma, meta
    centroids = mesh.centroids()
    inside = np.zeros(mesh.n_triangles, dtype=bool)
    for disk in truth.disks:
        inside |= np.hypot(
            centroids[:, 0] - disk.center[0], centroids[:, 1] - disk.center[1]
        ) <= disk.radius
    sigma = np.where(inside, truth.value, truth.background)
    meta = {
        "kind": DISKS,
        "disks": [{"center": list(d.center), "radius": d.radius} for d in truth.disks],
        "background": truth.background,
        "value": truth.value,
        "analytic_areas": [math.pi * d.radius**2 for d in truth.disks],
    }
    return sigma, meta


def _truth_state(config: RunConfig, out: Path):
    """Rebuild the star truth state from its artifacts (None for disk truths)."""
    meta = json.loads((out / "truth.json").read_text())
    if meta["kind"] != STAR_DRAW:
        return None, meta
    field = read_field(out / meta["radius_field"])
    return StarState(field, np.array(meta["center"])), meta


# --- stages -------------------------------------------------------------------


def _cmd_mesh(config: RunConfig, out: Path, args) -> None:
    layout = electrode_layout(config)
    manifest = _open_manifest(out, config_hash(config), args.force)
    coarse = build_disk_mesh(config.mesh.coarse_level, layout)
    fine = build_disk_mesh(config.mesh.fine_level, layout)
    write_mesh(out / "mesh_coarse.txt", coarse)
    write_mesh(out / "mesh_fine.txt", fine)
    _invalidate_downstream(manifest, "mesh")
    manifest["stages"]["mesh"] = {
        "artifacts": ["mesh_coarse.txt", "mesh_fine.txt"],
        "elements": {"coarse": coarse.n_triangles, "fine": fine.n_triangles},
    }
    _write_manifest(out, manifest)
    print(f"wrote mesh_coarse.txt ({coarse.n_triangles} elements) and "
          f"mesh_fine.txt ({fine.n_triangles} elements)")


def _cmd_make_truth(config: RunConfig, out: Path, args) -> None:
    manifest = _open_manifest(out, config_hash(config), args.force)
    _require_stages(manifest, out, "mesh")
    fine = read_mesh(out / "mesh_fine.txt")
    sigma, meta = _truth_sigma(config, fine)
    write_matrix_csv(out / "truth_sigma.csv", sigma.reshape(-1, 1))
    artifacts = ["truth_sigma.csv", "truth.json"]
    if config.truth.kind == STAR_DRAW:
        prior = build_prior(config.truth.star)
        state = prior.sample(np.random.default_rng(config.truth.seed))
        write_field(out / "truth_radius.field", state.radius_raw)
        artifacts.append("truth_radius.field")
    _write_json(out / "truth.json", meta)
    entry = {"artifacts": artifacts}
    if config.truth.kind == STAR_DRAW:
        entry["seed"] = config.truth.seed
    _invalidate_downstream(manifest, "make-truth")
    manifest["stages"]["make-truth"] = entry
    _write_manifest(out, manifest)
    values = sorted(float(v) for v in np.unique(np.round(sigma, 12)))
    print(f"wrote truth_sigma.csv ({sigma.size} triangles, values {values})")


def _cmd_make_data(config: RunConfig, out: Path, args) -> None:
    manifest = _open_manifest(out, config_hash(config), args.force)
    _require_stages(manifest, out, "mesh", "make-truth")
    layout = electrode_layout(config)
    fine = read_mesh(out / "mesh_fine.txt")
    sigma = read_matrix_csv(out / "truth_sigma.csv").ravel()
    patterns = adjacent_stimulation_patterns(config.mesh.n_electrodes, config.stimulation.amplitude)
    rng = np.random.default_rng(config.noise.seed)
    data = generate_data(fine, layout, sigma, patterns, config.noise.gamma, rng)
    write_matrix_csv(out / "data.csv", data.voltages.reshape(-1, 1))
    _write_json(
        out / "data_meta.json",
        {
            "gamma": config.noise.gamma,
            "seed": config.noise.seed,
            "mean_relative_error": data.mean_relative_error,
            "n_channels": int(data.voltages.size),
            "n_electrodes": config.mesh.n_electrodes,
            "amplitude": config.stimulation.amplitude,
        },
    )
    _invalidate_downstream(manifest, "make-data")
    manifest["stages"]["make-data"] = {
        "artifacts": ["data.csv", "data_meta.json"],
        "seed": config.noise.seed,
        "mean_relative_error": data.mean_relative_error,
    }
    _write_manifest(out, manifest)
    print(f"wrote data.csv ({data.voltages.size} channels, "
          f"mean relative error {data.mean_relative_error:.3f})")


def _load_dataset(config: RunConfig, out: Path) -> DataSet:
    y = read_matrix_csv(out / "data.csv").ravel()
    meta = json.loads((out / "data_meta.json").read_text())
    patterns = adjacent_stimulation_patterns(config.mesh.n_electrodes, config.stimulation.amplitude)
    return DataSet(y, meta["gamma"], patterns, meta.get("mean_relative_error"))


def _chain_config(config: RunConfig, seed: int) -> ChainConfig:
    c = config.chain
    return ChainConfig(
        n_samples=c.n_samples,
        burn_in=c.burn_in,
        beta=c.beta,
        delta=c.delta,
        seed=seed,
        thin=c.thin,
        checkpoint_every=c.checkpoint_every,
        monitors=c.monitors,
    )


def _execute_replica(config: RunConfig, out: Path, replica: int) -> dict:
    """Run one chain and write its artifacts; returns the manifest row."""
    layout = electrode_layout(config)
    coarse = read_mesh(out / "mesh_coarse.txt")
    data = _load_dataset(config, out)
    prior = build_prior(config.prior)
    evaluator = PotentialEvaluator(prior, coarse, layout, data)
    seed = config.chain.seed + replica
    chain_cfg = _chain_config(config, seed)
    tag = f"r{replica}"
    checkpoint = out / f"chain_{tag}.ckpt" if chain_cfg.checkpoint_every else None
    record = run_chain(prior, evaluator, chain_cfg, checkpoint)
    summary = mean_conductivities(record, prior, coarse)

    trace_to_csv(out / f"trace_{tag}.csv", record)
    write_matrix_csv(out / f"mean_sigma_{tag}.csv", summary.mean_sigma.reshape(-1, 1))
    write_matrix_csv(
        out / f"sigma_of_mean_state_{tag}.csv", summary.sigma_of_mean_state.reshape(-1, 1)
    )
    mean_field = (
        summary.mean_state.radius_raw if prior.family == STAR else summary.mean_state.field
    )
    write_field(out / f"mean_state_{tag}.field", mean_field)
    write_snapshots(
        out / f"snapshots_{tag}.snap", record, prior.spec.boundary, prior.spec.grid_size
    )

    info = {
        "replica": replica,
        "seed": seed,
        "accept": {m: list(c) for m, c in record.accept_counts.items()},
        "final_phi": record.final_phi,
        "n_accumulated": record.n_accumulated,
    }
    if prior.family == STAR:
        info["mean_center"] = [float(v) for v in summary.mean_state.center]
    _write_json(out / f"summary_{tag}.json", info)
    artifacts = [
        f"trace_{tag}.csv",
        f"mean_sigma_{tag}.csv",
        f"sigma_of_mean_state_{tag}.csv",
        f"mean_state_{tag}.field",
        f"snapshots_{tag}.snap",
        f"summary_{tag}.json",
    ]
    if checkpoint is not None and checkpoint.exists():
        artifacts.append(checkpoint.name)
    return {"replica": replica, "seed": seed, "artifacts": artifacts}


def _replica_worker(config_path: str, out_dir: str, allow_inverse_crime: bool,
                    seed_override: int | None, replica: int) -> dict:
    config = load_config(config_path, allow_inverse_crime=allow_inverse_crime)
    config = _apply_overrides(config, seed_override, out_dir, "run")
    return _execute_replica(config, Path(out_dir), replica)


def _cmd_run(config: RunConfig, out: Path, args) -> None:
    manifest = _open_manifest(out, config_hash(config), args.force)
    _require_stages(manifest, out, "mesh", "make-data")
    replicas = args.replicas
    if replicas < 1:
        raise ConfigError("--replicas must be at least 1")
    if replicas == 1:
        rows = [_execute_replica(config, out, 0)]
    else:
        with ProcessPoolExecutor(max_workers=min(replicas, 4)) as pool:
            futures = [
                pool.submit(
                    _replica_worker, args.config, str(out), args.allow_inverse_crime,
                    args.seed, i,
                )
                for i in range(replicas)
            ]
            rows = [f.result() for f in futures]
    rows.sort(key=lambda r: r["replica"])
    artifacts = [name for row in rows for name in row["artifacts"]]
    _invalidate_downstream(manifest, "run")
    manifest["stages"]["run"] = {
        "replicas": replicas,
        "seeds": [row["seed"] for row in rows],
        "artifacts": artifacts,
    }
    _write_manifest(out, manifest)
    for row in rows:
        summary = json.loads((out / f"summary_r{row['replica']}.json").read_text())
        accepts = ", ".join(
            f"{m} {a}/{p}" for m, (a, p) in sorted(summary["accept"].items())
        )
        print(f"replica {row['replica']}: seed {row['seed']}, accepted {accepts}, "
              f"final phi {summary['final_phi']:.4g}")


def _monitor_file_tag(name: str) -> str:
    return name.replace(":", "_").replace(",", "_")


def _cmd_diagnose(config: RunConfig, out: Path, args) -> None:
    manifest = _open_manifest(out, config_hash(config), args.force)
    _require_stages(manifest, out, "run")
    prior = build_prior(config.prior)
    artifacts = []
    for replica_seed, replica in zip(
        manifest["stages"]["run"]["seeds"], range(manifest["stages"]["run"]["replicas"])
    ):
        tag = f"r{replica}"
        columns, trace = trace_from_csv(out / f"trace_{tag}.csv")
        table = ess_table_from_trace(columns, trace, config.chain.burn_in, prior.family)
        write_table_csv(out / f"ess_{tag}.csv", table, ("quantity", "ess"))
        artifacts.append(f"ess_{tag}.csv")
        series = iteration_series(columns, trace, config.chain.burn_in, prior.family)
        meta: dict = {"seed": replica_seed, "columns": {}}
        thinned: dict[str, np.ndarray] = {}
        for name, values in series.items():
            entry: dict = {"points": int(values.size)}
            if values.size >= 100 and values.std() > 0:
                sub, stride = thin_to_ess(values)
                entry["stride"] = stride
                entry["kept"] = int(sub.size)
                thinned[name] = sub
                if sub.size >= 10 and sub.std() > 0:
                    pad = 0.5 * (values.max() - values.min()) or 1.0
                    grid = np.linspace(
                        values.min() - 0.1 * pad, values.max() + 0.1 * pad,
                        config.report.kde_points,
                    )
                    est = kde_1d(sub, grid)
                    fname = f"kde_{_monitor_file_tag(name)}_{tag}.csv"
                    write_density_csv(out / fname, est)
                    artifacts.append(fname)
                    entry["bandwidth"] = est.bandwidths[0]
            else:
                entry["skipped"] = "constant or too short"
            meta["columns"][name] = entry
        if "center:x" in thinned and "center:y" in thinned:
            x, y = thinned["center:x"], thinned["center:y"]
            k = min(x.size, y.size)
            if k >= 10:
                half = build_prior(config.prior).center_halfwidth
                grid = np.linspace(-half, half, config.report.kde_points)
                est = kde_2d(x[:k], y[:k], grid, grid)
                write_density_csv(out / f"kde_center_{tag}.csv", est)
                artifacts.append(f"kde_center_{tag}.csv")
                meta["center_bandwidths"] = list(est.bandwidths)
        _write_json(out / f"diagnose_{tag}.json", meta)
        artifacts.append(f"diagnose_{tag}.json")
    _invalidate_downstream(manifest, "diagnose")
    manifest["stages"]["diagnose"] = {"artifacts": artifacts}
    _write_manifest(out, manifest)
    print(f"diagnostics written for {manifest['stages']['run']['replicas']} replica(s)")


def _cmd_report(config: RunConfig, out: Path, args) -> None:
    manifest = _open_manifest(out, config_hash(config), args.force)
    _require_stages(manifest, out, "mesh", "make-truth", "make-data", "run", "diagnose")
    layout = electrode_layout(config)
    coarse = read_mesh(out / "mesh_coarse.txt")
    fine = read_mesh(out / "mesh_fine.txt")
    truth_sigma = read_matrix_csv(out / "truth_sigma.csv").ravel()
    data = _load_dataset(config, out)
    prior = build_prior(config.prior)
    evaluator = PotentialEvaluator(prior, coarse, layout, data)
    truth_state, truth_meta = _truth_state(config, out)
    resolution = config.report.raster_resolution
    window = (float(truth_sigma.min()), float(truth_sigma.max()))

    artifacts = ["truth.ppm"]
    render_conductivity_ppm(out / "truth.ppm", fine, truth_sigma, resolution, *window)
    report_summary: dict = {"value_window": list(window)}

    ess_rows = []
    for replica in range(manifest["stages"]["run"]["replicas"]):
        tag = f"r{replica}"
        mean_sigma = read_matrix_csv(out / f"mean_sigma_{tag}.csv").ravel()
        sigma_of_mean = read_matrix_csv(out / f"sigma_of_mean_state_{tag}.csv").ravel()
        mean_field = read_field(out / f"mean_state_{tag}.field")
        run_summary = json.loads((out / f"summary_{tag}.json").read_text())
        if prior.family == STAR:
            mean_state = StarState(mean_field, np.array(run_summary["mean_center"]))
        else:
            mean_state = prior.mean_state()
            mean_state.field = mean_field
        summary = MeanSummary(mean_state, sigma_of_mean, mean_sigma)

        render_conductivity_ppm(
            out / f"mean_sigma_{tag}.ppm", coarse, mean_sigma, resolution, *window
        )
        render_conductivity_ppm(
            out / f"sigma_of_mean_state_{tag}.ppm", coarse, sigma_of_mean, resolution, *window
        )
        artifacts += [f"mean_sigma_{tag}.ppm", f"sigma_of_mean_state_{tag}.ppm"]

        family, snapshots = read_snapshots(out / f"snapshots_{tag}.snap")
        count = min(config.report.sample_rasters, len(snapshots))
        if count:
            picks = np.linspace(0, len(snapshots) - 1, count).astype(int)
            for k, idx in enumerate(picks):
                it, values, center = snapshots[idx]
                field = GridField(prior.spec.boundary, values, prior.mean)
                state = StarState(field, center) if family == STAR else _state_like(prior, field)
                sample_sigma = prior.conductivity(state, coarse)
                fname = f"sample_{tag}_{k}.ppm"
                render_conductivity_ppm(out / fname, coarse, sample_sigma, resolution, *window)
                artifacts.append(fname)

        rows = misfit_report(prior, summary, evaluator)
        write_table_csv(out / f"misfit_{tag}.csv", rows, ("quantity", "phi"))
        (out / f"misfit_{tag}.txt").write_text(format_table_text(rows, ("quantity", "phi")))
        artifacts += [f"misfit_{tag}.csv", f"misfit_{tag}.txt"]

        with open(out / f"ess_{tag}.csv", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for name, value in reader:
                ess_rows.append((replica, name, value))

        entry: dict = {"misfit": {name: value for name, value in rows}}
        if prior.family == STAR and truth_meta["kind"] == STAR_DRAW:
            truth_center = np.array(truth_meta["center"])
            err = float(np.linalg.norm(np.array(run_summary["mean_center"]) - truth_center))
            entry["center_error"] = err
        report_summary[tag] = entry

    with open(out / "report_ess.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("replica", "quantity", "ess"))
        for replica, name, value in ess_rows:
            writer.writerow((replica, name, value))
    artifacts.append("report_ess.csv")
    _write_json(out / "report_summary.json", report_summary)
    artifacts.append("report_summary.json")
    manifest["stages"]["report"] = {"artifacts": artifacts}
    _write_manifest(out, manifest)
    print(f"report written: {len(artifacts)} artifact(s)")


def _state_like(prior, field: GridField):
    state = prior.mean_state()
    state.field = field
    return state


# --- entry point ---------------------------------------------------------------


def _apply_overrides(config: RunConfig, seed: int | None, out: str | None, command: str) -> RunConfig:
    if out is not None:
        config = replace(config, output_dir=out)
    if seed is not None:
        if command == "make-truth":
            config = replace(config, truth=replace(config.truth, seed=seed))
        elif command == "make-data":
            config = replace(config, noise=replace(config.noise, seed=seed))
        elif command == "run":
            config = replace(config, chain=replace(config.chain, seed=seed))
        else:
            raise ConfigError(f"--seed has no effect on `eit {command}`")
    return config


_COMMANDS = {
    "mesh": _cmd_mesh,
    "make-truth": _cmd_make_truth,
    "make-data": _cmd_make_data,
    "run": _cmd_run,
    "diagnose": _cmd_diagnose,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eit",
        description="Bayesian electrical impedance tomography pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "mesh": "build and store the coarse and fine disk meshes",
        "make-truth": "construct the ground-truth conductivity on the fine mesh",
        "make-data": "simulate noisy electrode voltages from the truth",
        "run": "sample the posterior with pCN chains on the coarse mesh",
        "diagnose": "effective sample sizes and kernel density estimates",
        "report": "rasters, misfit tables, and aggregated diagnostics",
    }
    for name in _STAGES:
        p = sub.add_parser(name, help=descriptions[name])
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the stage's seed (truth, noise, or chain)")
        p.add_argument("--out", default=None, help="override the config's output_dir")
        p.add_argument("--force", action="store_true",
                       help="proceed despite a manifest from a different config")
        p.add_argument("--allow-inverse-crime", action="store_true",
                       help="permit equal fine and coarse refinement levels")
        if name == "run":
            p.add_argument("--replicas", type=int, default=1,
                           help="number of independent chains (seeds seed+0..K-1)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, allow_inverse_crime=args.allow_inverse_crime)
        config = _apply_overrides(config, args.seed, args.out, args.command)
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](config, out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StaleManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (MeshFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, AdmissibilityError, ChargeConservationError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
