"""
Run Configuration Module - JSON run configs
Parses and validates run configs into the scene, simulation, view and
calibration dataclasses, and renders a resolved config back to JSON for
manifests. Unknown keys are errors reported with their JSON path.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from calibrate import DEFAULT_BUDGET, ParamEntry, ParamVector
from constitutive import ElasticParams, Material, ViscoParams
from frames import ViewSpec
from mpm import SimConfig
from scene import Box, FillSpec, ImpulseSpec, MaterialRegion, SceneSpec
from tensor3 import ViscompmError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

MATERIAL_KEYS = {
    "youngs_e", "poisson_nu", "nu_d", "nu_v", "lame_lambda_n", "lame_mu_n",
    "coeff_a", "coeff_b", "elastic_enabled", "visco_enabled",
}
SCENE_KEYS = {
    "particle_source", "density_rho", "fill", "material", "regions", "anchors",
    "impulses", "initial_velocity", "initial_stretch",
}
SIM_KEYS = {
    "grid_dims", "dx", "dt", "substeps_per_frame", "gravity", "boundary_margin",
    "boundary_policy", "deterministic",
}
TOP_KEYS = {"scene", "sim", "frames", "output_dir", "seed", "view", "calibration", "record_velocities"}


class ConfigError(ViscompmError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class CalibrationSpec:
    theta0: ParamVector
    budget: int = DEFAULT_BUDGET


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec
    sim: SimConfig
    frames: int = 24
    output_dir: str = "output"
    seed: int = 0
    view: ViewSpec = field(default_factory=ViewSpec)
    calibration: Optional[CalibrationSpec] = None
    record_velocities: bool = False


def _check_keys(obj: Any, path: str, allowed: set, required: Tuple[str, ...] = ()) -> Dict[str, Any]:
    if not isinstance(obj, dict):
        raise ConfigError("expected an object", path)
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}", f"{path}.{key}")
    for key in required:
        if key not in obj:
            raise ConfigError(f"missing required key {key!r}", f"{path}.{key}")
    return obj


def _number(value: Any, path: str, allow_inf: bool = False) -> float:
    if allow_inf and value == "inf":
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path)
    if not math.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", path)
    return float(value)


def _integer(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", path)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", path)
    return value


def _boolean(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"expected true or false, got {value!r}", path)
    return value


def _vec3(value: Any, path: str) -> Tuple[float, float, float]:
    if not isinstance(value, list) or len(value) != 3:
        raise ConfigError(f"expected a list of 3 numbers, got {value!r}", path)
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _int3(value: Any, path: str) -> Tuple[int, int, int]:
    if not isinstance(value, list) or len(value) != 3:
        raise ConfigError(f"expected a list of 3 integers, got {value!r}", path)
    return tuple(_integer(v, f"{path}[{i}]") for i, v in enumerate(value))


def _wrap(path: str, build):
    """Run a dataclass constructor, re-raising its validation errors at `path`."""
    try:
        return build()
    except ConfigError:
        raise
    except (ViscompmError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc), path) from exc


def parse_material(obj: Any, path: str, base: Optional[Material] = None) -> Material:
    """Material from config; keys absent here fall back to `base` (region overrides)."""
    _check_keys(obj, path, MATERIAL_KEYS, () if base is not None else ("youngs_e", "poisson_nu"))
    old_e = base.elastic if base else None
    old_v = base.visco if base else None

    youngs_e = _number(obj["youngs_e"], f"{path}.youngs_e") if "youngs_e" in obj else old_e.youngs_e
    poisson_nu = _number(obj["poisson_nu"], f"{path}.poisson_nu") if "poisson_nu" in obj else old_e.poisson_nu
    elastic = _wrap(path, lambda: ElasticParams(youngs_e, poisson_nu))

    def optional(key: str, fallback, allow_inf: bool = False):
        if key in obj and obj[key] is not None:
            return _number(obj[key], f"{path}.{key}", allow_inf)
        return fallback

    nu_d = optional("nu_d", old_v.nu_d if old_v else math.inf, allow_inf=True)
    nu_v = optional("nu_v", None if old_v is None or old_v.nu_v == old_v.nu_d else old_v.nu_v, allow_inf=True)
    follows = old_v is None or (old_v.lame_lambda_n == old_e.lame_lambda and old_v.lame_mu_n == old_e.lame_mu)
    lame_lambda_n = optional("lame_lambda_n", None if follows else old_v.lame_lambda_n)
    lame_mu_n = optional("lame_mu_n", None if follows else old_v.lame_mu_n)
    coeff_a = optional("coeff_a", old_v.coeff_a if old_v else None)
    coeff_b = optional("coeff_b", old_v.coeff_b if old_v else None)
    visco = _wrap(path, lambda: ViscoParams.from_elastic(
        elastic, nu_d=nu_d, nu_v=nu_v, lame_lambda_n=lame_lambda_n, lame_mu_n=lame_mu_n,
        coeff_a=coeff_a, coeff_b=coeff_b))

    elastic_enabled = _boolean(obj["elastic_enabled"], f"{path}.elastic_enabled") \
        if "elastic_enabled" in obj else (base.elastic_enabled if base else True)
    visco_enabled = _boolean(obj["visco_enabled"], f"{path}.visco_enabled") \
        if "visco_enabled" in obj else (base.visco_enabled if base else True)
    return Material(elastic, visco, elastic_enabled, visco_enabled)


def parse_box(obj: Any, path: str) -> Box:
    _check_keys(obj, path, {"lo", "hi"}, ("lo", "hi"))
    lo = _vec3(obj["lo"], f"{path}.lo")
    hi = _vec3(obj["hi"], f"{path}.hi")
    return _wrap(path, lambda: Box(lo, hi))


def _list(value: Any, path: str) -> List[Any]:
    if not isinstance(value, list):
        raise ConfigError(f"expected a list, got {value!r}", path)
    return value


def parse_scene(obj: Any, path: str = "$.scene", base_dir: str = ".") -> SceneSpec:
    _check_keys(obj, path, SCENE_KEYS, ("particle_source", "density_rho", "material"))
    source = obj["particle_source"]
    if not isinstance(source, str) or not source:
        raise ConfigError("expected a file path", f"{path}.particle_source")
    source = os.path.normpath(os.path.join(base_dir, source))
    material = parse_material(obj["material"], f"{path}.material")

    fill = None
    if obj.get("fill") is not None:
        fpath = f"{path}.fill"
        fobj = _check_keys(obj["fill"], fpath, {"voxel_resolution", "seed_per_voxel"})
        resolution = _int3(fobj.get("voxel_resolution", [32, 32, 32]), f"{fpath}.voxel_resolution")
        per_voxel = _integer(fobj.get("seed_per_voxel", 1), f"{fpath}.seed_per_voxel", 1)
        fill = _wrap(fpath, lambda: FillSpec(resolution, per_voxel))

    regions = []
    for i, robj in enumerate(_list(obj.get("regions", []), f"{path}.regions")):
        rpath = f"{path}.regions[{i}]"
        _check_keys(robj, rpath, {"name", "box", "material"}, ("name", "box"))
        if not isinstance(robj["name"], str) or not robj["name"]:
            raise ConfigError("expected a non-empty name", f"{rpath}.name")
        regions.append(MaterialRegion(
            robj["name"], parse_box(robj["box"], f"{rpath}.box"),
            parse_material(robj.get("material", {}), f"{rpath}.material", base=material)))

    anchors = tuple(parse_box(a, f"{path}.anchors[{i}]")
                    for i, a in enumerate(_list(obj.get("anchors", []), f"{path}.anchors")))
    impulses = []
    for i, iobj in enumerate(_list(obj.get("impulses", []), f"{path}.impulses")):
        ipath = f"{path}.impulses[{i}]"
        _check_keys(iobj, ipath, {"region", "acceleration", "start_frame", "end_frame"},
                    ("region", "acceleration"))
        region = parse_box(iobj["region"], f"{ipath}.region")
        accel = _vec3(iobj["acceleration"], f"{ipath}.acceleration")
        start = _integer(iobj.get("start_frame", 0), f"{ipath}.start_frame", 0)
        end = _integer(iobj.get("end_frame", start), f"{ipath}.end_frame", 0)
        impulses.append(_wrap(ipath, lambda: ImpulseSpec(region, accel, start, end)))

    density = _number(obj["density_rho"], f"{path}.density_rho")
    velocity = _vec3(obj.get("initial_velocity", [0, 0, 0]), f"{path}.initial_velocity")
    stretch = _vec3(obj.get("initial_stretch", [1, 1, 1]), f"{path}.initial_stretch")
    return _wrap(path, lambda: SceneSpec(
        density_rho=density, material=material, particle_source=source, fill=fill,
        anchors=anchors, impulses=tuple(impulses), regions=tuple(regions),
        initial_velocity=velocity, initial_stretch=stretch))


def parse_sim(obj: Any, path: str = "$.sim") -> SimConfig:
    _check_keys(obj, path, SIM_KEYS)
    kwargs: Dict[str, Any] = {}
    if "grid_dims" in obj:
        kwargs["grid_dims"] = _int3(obj["grid_dims"], f"{path}.grid_dims")
    for key in ("dx", "dt"):
        if key in obj:
            kwargs[key] = _number(obj[key], f"{path}.{key}")
    for key in ("substeps_per_frame", "boundary_margin"):
        if key in obj:
            kwargs[key] = _integer(obj[key], f"{path}.{key}")
    if "gravity" in obj:
        kwargs["gravity"] = _vec3(obj["gravity"], f"{path}.gravity")
    if "boundary_policy" in obj:
        if obj["boundary_policy"] not in ("sticky", "slip"):
            raise ConfigError(f"expected 'sticky' or 'slip', got {obj['boundary_policy']!r}",
                              f"{path}.boundary_policy")
        kwargs["boundary_policy"] = obj["boundary_policy"]
    if "deterministic" in obj:
        kwargs["deterministic"] = _boolean(obj["deterministic"], f"{path}.deterministic")
    return _wrap(path, lambda: SimConfig(**kwargs))


def parse_view(obj: Any, path: str = "$.view") -> ViewSpec:
    _check_keys(obj, path, {"axis", "width", "height", "splat", "lo", "hi"})
    kwargs: Dict[str, Any] = {}
    if "axis" in obj:
        kwargs["axis"] = obj["axis"]
    for key in ("width", "height", "splat"):
        if key in obj:
            kwargs[key] = _integer(obj[key], f"{path}.{key}", 1)
    for key in ("lo", "hi"):
        if key in obj:
            kwargs[key] = _vec3(obj[key], f"{path}.{key}")
    return _wrap(path, lambda: ViewSpec(**kwargs))


def parse_calibration(obj: Any, path: str = "$.calibration") -> CalibrationSpec:
    _check_keys(obj, path, {"budget", "parameters"}, ("parameters",))
    budget = _integer(obj.get("budget", DEFAULT_BUDGET), f"{path}.budget", 0)
    entries = []
    for i, pobj in enumerate(_list(obj["parameters"], f"{path}.parameters")):
        ppath = f"{path}.parameters[{i}]"
        _check_keys(pobj, ppath, {"name", "value", "lower", "upper", "log_scale", "region"},
                    ("name", "value", "lower", "upper"))
        name = pobj["name"]
        value = _number(pobj["value"], f"{ppath}.value")
        lower = _number(pobj["lower"], f"{ppath}.lower")
        upper = _number(pobj["upper"], f"{ppath}.upper")
        log_scale = _boolean(pobj["log_scale"], f"{ppath}.log_scale") if pobj.get("log_scale") is not None else None
        region = pobj.get("region")
        entries.append(_wrap(ppath, lambda: ParamEntry(name, value, lower, upper, log_scale, region)))
    if not entries:
        raise ConfigError("at least one parameter is required", f"{path}.parameters")
    theta0 = _wrap(f"{path}.parameters", lambda: ParamVector(tuple(entries)))
    return CalibrationSpec(theta0, budget)


def parse_run_config(data: Any, base_dir: str = ".") -> RunConfig:
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("run_config")
    _check_keys(data, "$", TOP_KEYS, ("scene",))
    scene = parse_scene(data["scene"], "$.scene", base_dir)
    sim = parse_sim(data.get("sim", {}))
    frames = _integer(data.get("frames", 24), "$.frames", 0)
    output_dir = data.get("output_dir", "output")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("expected a directory path", "$.output_dir")
    seed = _integer(data.get("seed", 0), "$.seed", 0)
    view = parse_view(data.get("view", {}))
    calibration = parse_calibration(data["calibration"]) if data.get("calibration") is not None else None
    record = _boolean(data.get("record_velocities", False), "$.record_velocities")
    return RunConfig(scene, sim, frames, os.path.normpath(os.path.join(base_dir, output_dir)),
                     seed, view, calibration, record)


def load_run_config(path: str) -> RunConfig:
    """Read a run config (or a manifest.json written by a previous run)."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_run_config(data, os.path.dirname(os.path.abspath(path)))


def _json_number(value: Optional[float]):
    if value is None:
        return None
    return "inf" if math.isinf(value) else value


def material_to_dict(material: Material) -> Dict[str, Any]:
    visco = material.visco
    return {
        "youngs_e": material.elastic.youngs_e,
        "poisson_nu": material.elastic.poisson_nu,
        "nu_d": _json_number(visco.nu_d),
        "nu_v": _json_number(visco.nu_v),
        "lame_lambda_n": visco.lame_lambda_n,
        "lame_mu_n": visco.lame_mu_n,
        "coeff_a": visco.coeff_a,
        "coeff_b": visco.coeff_b,
        "elastic_enabled": material.elastic_enabled,
        "visco_enabled": material.visco_enabled,
    }


def _box_to_dict(box: Box) -> Dict[str, Any]:
    return {"lo": list(box.lo), "hi": list(box.hi)}


def run_config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Fully resolved config; parse_run_config of the result rebuilds the same RunConfig."""
    scene = config.scene
    sim = config.sim
    data: Dict[str, Any] = {
        "scene": {
            "particle_source": os.path.abspath(scene.particle_source),
            "density_rho": scene.density_rho,
            "fill": None if scene.fill is None else {
                "voxel_resolution": list(scene.fill.voxel_resolution),
                "seed_per_voxel": scene.fill.seed_per_voxel,
            },
            "material": material_to_dict(scene.material),
            "regions": [{"name": r.name, "box": _box_to_dict(r.box), "material": material_to_dict(r.material)}
                        for r in scene.regions],
            "anchors": [_box_to_dict(b) for b in scene.anchors],
            "impulses": [{"region": _box_to_dict(i.region), "acceleration": list(i.acceleration),
                          "start_frame": i.start_frame, "end_frame": i.end_frame} for i in scene.impulses],
            "initial_velocity": list(scene.initial_velocity),
            "initial_stretch": list(scene.initial_stretch),
        },
        "sim": {
            "grid_dims": list(sim.grid_dims),
            "dx": sim.dx,
            "dt": sim.dt,
            "substeps_per_frame": sim.substeps_per_frame,
            "gravity": list(sim.gravity),
            "boundary_margin": sim.boundary_margin,
            "boundary_policy": sim.boundary_policy.value,
            "deterministic": sim.deterministic,
        },
        "frames": config.frames,
        "output_dir": os.path.abspath(config.output_dir),
        "seed": config.seed,
        "view": config.view.to_dict(),
        "record_velocities": config.record_velocities,
    }
    if config.calibration is not None:
        data["calibration"] = {
            "budget": config.calibration.budget,
            "parameters": [{"name": e.name, "value": e.value, "lower": e.lower, "upper": e.upper,
                            "log_scale": e.log_scale, "region": e.region}
                           for e in config.calibration.theta0.entries],
        }
    return data
