"""
Run Service Module - simulation and calibration drivers
Business logic behind the command line and the results API. Every public
driver returns (success: bool, message: str); library errors are turned into
failure messages here.
"""

import csv
import json
import logging
import math
import os
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from calibrate import ParamVector, best_so_far, calibrate
from database import init_database, insert_evaluation, insert_run, update_run_status
from frames import (
    SliceSpec, encode_pgm, list_frames, rasterize_frame, read_frame, read_trajectory,
    spacetime_slice, write_pgm, write_trajectory,
)
from mpm import SimulationAbort, Trajectory, simulate
from run_config import MANIFEST_VERSION, RunConfig, load_run_config, run_config_to_dict
from scene import FillSpec, build_scene, internal_fill, load_particles
from tensor3 import DomainError, ViscompmError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
DIAGNOSTICS_FILE = "diagnostics.csv"
VELOCITIES_FILE = "velocities.npy"
THETA_FILE = "theta_best.json"
LOSS_HISTORY_FILE = "loss_history.csv"

DIAGNOSTIC_COLUMNS = [
    "frame", "time", "kinetic_energy", "elastic_energy", "visco_energy", "total_energy",
    "max_speed", "singular_value_clamps", "interior_clamps",
]


def apply_overrides(config: RunConfig, output_dir: Optional[str] = None, seed: Optional[int] = None,
                    frames: Optional[int] = None, deterministic: Optional[bool] = None) -> RunConfig:
    """Command-line flags take precedence over the config file."""
    if frames is not None and frames < 0:
        raise DomainError(f"frames must be >= 0, got {frames}.")
    changes: Dict[str, object] = {}
    if output_dir is not None:
        changes["output_dir"] = os.path.abspath(output_dir)
    if seed is not None:
        changes["seed"] = seed
    if frames is not None:
        changes["frames"] = frames
    if deterministic is not None:
        changes["sim"] = replace(config.sim, deterministic=deterministic)
    return replace(config, **changes) if changes else config


def _register(kind: str, config: RunConfig) -> Optional[int]:
    init_database()
    run_id = insert_run(kind, os.path.abspath(config.output_dir), json.dumps(run_config_to_dict(config)))
    if run_id is None:
        logger.warning("Could not record the %s run in the registry.", kind)
    return run_id


def _finish(run_id: Optional[int], success: bool, message: str) -> Tuple[bool, str]:
    if run_id is not None:
        update_run_status(run_id, "done" if success else "failed", message)
    return success, message


def write_manifest(config: RunConfig, trajectory: Trajectory) -> str:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "run_config": run_config_to_dict(config),
        "particle_count": trajectory.particle_count,
        "frame_count": trajectory.frame_count,
        "frame_dt": trajectory.frame_dt,
    }
    path = os.path.join(config.output_dir, MANIFEST_FILE)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2)
    return path


def write_diagnostics(path: str, trajectory: Trajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(DIAGNOSTIC_COLUMNS)
        for d in trajectory.diagnostics:
            writer.writerow([d.frame, repr(d.time), repr(d.kinetic_energy), repr(d.elastic_energy),
                             repr(d.visco_energy), repr(d.total_energy), repr(d.max_speed),
                             d.singular_value_clamps, d.interior_clamps])


def run_simulate(config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None,
                 frames: Optional[int] = None, deterministic: Optional[bool] = None) -> Tuple[bool, str]:
    """
    Simulate a run config and write its outputs.

    Writes frame_%04d.bin for every snapshot and manifest.json; runs with at
    least one frame also get diagnostics.csv (and velocities.npy when the
    config records velocities).

    Returns:
        tuple: (success: bool, message: str)
    """
    try:
        config = apply_overrides(load_run_config(config_path), output_dir, seed, frames, deterministic)
    except ViscompmError as exc:
        return False, f"Invalid config: {exc}"

    run_id = _register("simulate", config)
    try:
        scene = build_scene(config.scene, seed=config.seed)
        trajectory = simulate(scene, config.sim, config.frames, config.record_velocities)
    except SimulationAbort as exc:
        return _finish(run_id, False, f"Simulation aborted: {exc}")
    except ViscompmError as exc:
        return _finish(run_id, False, f"Simulation failed: {exc}")
    except OSError as exc:
        return _finish(run_id, False, f"Cannot read particle source: {exc}")

    try:
        write_trajectory(config.output_dir, trajectory)
        if config.frames > 0:
            write_diagnostics(os.path.join(config.output_dir, DIAGNOSTICS_FILE), trajectory)
            if trajectory.velocities is not None:
                np.save(os.path.join(config.output_dir, VELOCITIES_FILE), trajectory.velocities)
        write_manifest(config, trajectory)
    except OSError as exc:
        return _finish(run_id, False, f"Cannot write outputs to {config.output_dir}: {exc}")

    return _finish(run_id, True, f"Simulated {config.frames} frames of {trajectory.particle_count} particles; "
                                 f"outputs in {config.output_dir}.")


def _json_loss(loss: float) -> Optional[float]:
    return loss if math.isfinite(loss) else None


def run_calibrate(config_path: str, ref_dir: str, output_dir: Optional[str] = None,
                  budget: Optional[int] = None) -> Tuple[bool, str]:
    """
    Fit the config's calibration parameters to the frames in ref_dir.
    Writes theta_best.json and loss_history.csv to the output directory.

    Returns:
        tuple: (success: bool, message: str)
    """
    try:
        config = apply_overrides(load_run_config(config_path), output_dir)
    except ViscompmError as exc:
        return False, f"Invalid config: {exc}"
    if config.calibration is None:
        return False, "Invalid config: $.calibration: a calibration section is required."
    if budget is not None and budget < 0:
        return False, f"Budget must be >= 0, got {budget}."
    theta0 = config.calibration.theta0
    budget = config.calibration.budget if budget is None else budget

    try:
        ref = read_trajectory(ref_dir)
    except ViscompmError as exc:
        return False, f"Invalid reference frames: {exc}"

    try:
        scene = build_scene(config.scene, seed=config.seed)
    except (ViscompmError, OSError) as exc:
        return False, f"Cannot build scene: {exc}"
    if scene.points.shape[0] != ref.particle_count:
        return False, (f"Invalid reference frames: frame 0: holds {ref.particle_count} particles, "
                       f"the scene has {scene.points.shape[0]}.")

    run_id = _register("calibrate", config)

    def record(index: int, theta: ParamVector, loss: float) -> None:
        if run_id is not None:
            insert_evaluation(run_id, index, json.dumps(theta.as_dict()), loss)

    try:
        best, history = calibrate(scene, config.sim, ref, theta0, budget, on_evaluation=record)
    except ViscompmError as exc:
        return _finish(run_id, False, f"Calibration failed: {exc}")

    try:
        os.makedirs(config.output_dir, exist_ok=True)
        write_theta(os.path.join(config.output_dir, THETA_FILE), best, history)
        write_loss_history(os.path.join(config.output_dir, LOSS_HISTORY_FILE), history)
    except OSError as exc:
        return _finish(run_id, False, f"Cannot write outputs to {config.output_dir}: {exc}")

    best_loss = min(history)
    return _finish(run_id, True, f"Calibrated {len(theta0)} parameters in {len(history)} evaluations; "
                                 f"loss {history[0]:.6e} -> {best_loss:.6e}; outputs in {config.output_dir}.")


def write_theta(path: str, best: ParamVector, history: List[float]) -> None:
    data = {
        "parameters": best.as_dict(),
        "loss": _json_loss(min(history)),
        "initial_loss": _json_loss(history[0]),
        "evaluations": len(history),
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2)


def write_loss_history(path: str, history: List[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["evaluation", "loss", "best_loss"])
        for i, (loss, best) in enumerate(zip(history, best_so_far(history))):
            writer.writerow([i, repr(loss), repr(best)])


def run_fill(input_path: str, output_path: str, voxel_resolution: Tuple[int, int, int] = (32, 32, 32),
             seed_per_voxel: int = 1, seed: int = 0) -> Tuple[bool, str]:
    """Fill a closed particle shell and write the result as x,y,z CSV."""
    try:
        fill = FillSpec(voxel_resolution, seed_per_voxel)
        points = load_particles(input_path)
        filled = internal_fill(points, fill, seed)
    except ViscompmError as exc:
        return False, f"Fill failed: {exc}"
    except OSError as exc:
        return False, f"Cannot read {input_path}: {exc}"
    try:
        np.savetxt(output_path, filled, fmt="%.17g", delimiter=",", header="x,y,z", comments="")
    except OSError as exc:
        return False, f"Cannot write {output_path}: {exc}"
    added = filled.shape[0] - points.shape[0]
    return True, f"Added {added} interior particles to {points.shape[0]}; wrote {output_path}."


def load_run(run_dir: str) -> Tuple[RunConfig, Dict]:
    """Resolved config and raw manifest of a finished run directory."""
    path = os.path.join(run_dir, MANIFEST_FILE)
    with open(path, "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    return load_run_config(path), manifest


def render_frame_pgm(run_dir: str, frame: int) -> bytes:
    config, _ = load_run(run_dir)
    dump = read_frame(os.path.join(run_dir, "frame_%04d.bin" % frame))
    return encode_pgm(rasterize_frame(dump.positions, config.view.for_domain(config.sim)))


def render_slice(run_dir: str, row: int):
    config, _ = load_run(run_dir)
    trajectory = read_trajectory(run_dir)
    return spacetime_slice(trajectory.frames, SliceSpec(config.view.for_domain(config.sim), row))


def run_slice(run_dir: str, row: int, output_path: str) -> Tuple[bool, str]:
    """Write the space-time slice of a finished run at image row `row` as PGM."""
    try:
        image = render_slice(run_dir, row)
        write_pgm(output_path, image)
    except ViscompmError as exc:
        return False, f"Slice failed: {exc}"
    except OSError as exc:
        return False, f"Cannot read run {run_dir}: {exc}"
    return True, f"Wrote {image.shape[0]}x{image.shape[1]} slice to {output_path}."


def read_diagnostics(path: str) -> List[Dict[str, float]]:
    with open(path, "r", newline="", encoding="utf-8") as handle:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(handle)]


def run_summary(run_dir: str) -> Dict:
    """Manifest plus a diagnostics summary of a run directory."""
    _, manifest = load_run(run_dir)
    summary: Dict = {"manifest": manifest, "frame_files": len(list_frames(run_dir)), "diagnostics": None}
    path = os.path.join(run_dir, DIAGNOSTICS_FILE)
    if os.path.exists(path):
        rows = read_diagnostics(path)
        summary["diagnostics"] = {
            "frames": len(rows) - 1,
            "initial_total_energy": rows[0]["total_energy"],
            "final_total_energy": rows[-1]["total_energy"],
            "peak_speed": max(r["max_speed"] for r in rows),
            "singular_value_clamps": int(rows[-1]["singular_value_clamps"]),
            "interior_clamps": int(rows[-1]["interior_clamps"]),
        }
    return summary


def inspect_run(run_dir: str) -> Tuple[bool, str]:
    try:
        summary = run_summary(run_dir)
    except (OSError, ValueError, ViscompmError) as exc:
        return False, f"Cannot inspect {run_dir}: {exc}"
    manifest = summary["manifest"]
    sim = manifest["run_config"]["sim"]
    lines = [
        f"run directory: {run_dir}",
        f"particles: {manifest['particle_count']}",
        f"frames: {manifest['frame_count'] - 1} (frame_dt {manifest['frame_dt']} s, "
        f"{summary['frame_files']} dumps on disk)",
        f"grid: {sim['grid_dims']} dx={sim['dx']} dt={sim['dt']} substeps={sim['substeps_per_frame']} "
        f"boundary={sim['boundary_policy']}",
    ]
    diag = summary["diagnostics"]
    if diag is not None:
        lines += [
            f"total energy: {diag['initial_total_energy']:.6e} J -> {diag['final_total_energy']:.6e} J",
            f"peak speed: {diag['peak_speed']:.4e} m/s",
            f"clamps: {diag['singular_value_clamps']} singular values, {diag['interior_clamps']} particles",
        ]
    return True, "\n".join(lines)
