"""
Calibrate Module - physical parameter estimation
Fits material parameters so simulated particle trajectories match a
reference trajectory: an L2 trajectory loss, central finite differences in
the search scale, and a bounded downhill-simplex search with one restart.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import Bounds, minimize

from constitutive import ElasticParams, Material, ViscoParams
from mpm import SimConfig, Trajectory, simulate, worker_threads
from scene import Scene
from tensor3 import ViscompmError

logger = logging.getLogger(__name__)

LOG_SCALED = {"youngs_e", "nu_d", "nu_v", "lame_mu_n", "lame_lambda_n"}
LINEAR = {"poisson_nu", "coeff_a", "coeff_b"}
PARAMETER_NAMES = LOG_SCALED | LINEAR

DEFAULT_BUDGET = 60
# initial simplex edge as a fraction of each entry's search range
SIMPLEX_STEP = 0.15


class CalibrationError(ViscompmError):
    def __init__(self, message: str, entry: Optional[str] = None):
        super().__init__(message)
        self.entry = entry


@dataclass(frozen=True)
class ParamEntry:
    name: str
    value: float
    lower: float
    upper: float
    log_scale: Optional[bool] = None
    region: Optional[str] = None

    def __post_init__(self):
        if self.name not in PARAMETER_NAMES:
            raise CalibrationError(f"Unknown parameter {self.name!r}; expected one of {sorted(PARAMETER_NAMES)}.",
                                   self.name)
        if self.log_scale is None:
            object.__setattr__(self, "log_scale", self.name in LOG_SCALED)
        if not (self.lower <= self.value <= self.upper):
            raise CalibrationError(f"{self.key} = {self.value} lies outside [{self.lower}, {self.upper}].",
                                   self.key)
        if self.log_scale and not (self.lower > 0.0):
            raise CalibrationError(f"{self.key} is log-scaled and needs a positive lower bound.", self.key)

    @property
    def key(self) -> str:
        return f"{self.region}.{self.name}" if self.region else self.name

    def to_search(self, value: float) -> float:
        return math.log10(value) if self.log_scale else value

    def from_search(self, s: float) -> float:
        return 10.0 ** s if self.log_scale else s


@dataclass(frozen=True)
class ParamVector:
    """Named, bounded parameters; log-scaled entries are searched in log10 space."""
    entries: Tuple[ParamEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        keys = self.keys()
        if len(set(keys)) != len(keys):
            raise CalibrationError(f"Duplicate parameter entries: {keys}.")

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> List[str]:
        return [e.key for e in self.entries]

    def as_dict(self) -> Dict[str, float]:
        return {e.key: e.value for e in self.entries}

    def to_search(self) -> NDArray[np.float64]:
        return np.array([e.to_search(e.value) for e in self.entries], dtype=np.float64)

    def search_bounds(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        lower = np.array([e.to_search(e.lower) for e in self.entries])
        upper = np.array([e.to_search(e.upper) for e in self.entries])
        return lower, upper

    def from_search(self, s: Sequence[float]) -> "ParamVector":
        """New vector at search-space point `s`, clipped into the bounds."""
        entries = []
        for entry, si in zip(self.entries, s):
            value = min(max(entry.from_search(float(si)), entry.lower), entry.upper)
            entries.append(replace(entry, value=value))
        return ParamVector(tuple(entries))


def _updated_material(material: Material, values: Dict[str, float]) -> Material:
    if not values:
        return material
    old_e, old_v = material.elastic, material.visco
    elastic = ElasticParams(values.get("youngs_e", old_e.youngs_e),
                            values.get("poisson_nu", old_e.poisson_nu))
    # the viscoelastic moduli follow the elastic pair unless set separately
    followed = (old_v.lame_lambda_n == old_e.lame_lambda and old_v.lame_mu_n == old_e.lame_mu)
    lame_lambda_n = values.get("lame_lambda_n", elastic.lame_lambda if followed else old_v.lame_lambda_n)
    lame_mu_n = values.get("lame_mu_n", elastic.lame_mu if followed else old_v.lame_mu_n)
    nu_d = values.get("nu_d", old_v.nu_d)
    tied = old_v.nu_v == old_v.nu_d
    nu_v = values.get("nu_v", nu_d if tied else old_v.nu_v)
    coeff_a = values.get("coeff_a", old_v.coeff_a)
    coeff_b = values.get("coeff_b", old_v.coeff_b)
    if (coeff_a is None) != (coeff_b is None):
        coeff_a = 1.0 if coeff_a is None else coeff_a
        coeff_b = 0.0 if coeff_b is None else coeff_b
    visco = ViscoParams(lame_lambda_n, lame_mu_n, nu_d, nu_v, coeff_a, coeff_b)
    return replace(material, elastic=elastic, visco=visco)


def apply_theta(scene: Scene, theta: ParamVector) -> Scene:
    """Scene with theta written into the default material and named regions."""
    by_target: Dict[Optional[str], Dict[str, float]] = {}
    for entry in theta.entries:
        by_target.setdefault(entry.region, {})[entry.name] = entry.value
    names = scene.spec.region_names()
    for region in by_target:
        if region is not None and region not in names:
            raise CalibrationError(f"Parameter targets unknown region {region!r}.", region)
    material = _updated_material(scene.spec.material, by_target.get(None, {}))
    regions = [_updated_material(r.material, by_target.get(r.name, {})) for r in scene.spec.regions]
    return scene.with_materials(material, regions)


def trajectory_loss(sim: Trajectory, ref: Trajectory) -> float:
    """Mean over frames and particles of the squared position error, in m^2."""
    if sim.frame_count != ref.frame_count:
        raise CalibrationError(f"Frame count mismatch: simulated {sim.frame_count}, reference {ref.frame_count}.")
    if sim.particle_count != ref.particle_count:
        raise CalibrationError(
            f"Particle count mismatch: simulated {sim.particle_count}, reference {ref.particle_count}.")
    diff = sim.frames - ref.frames
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def finite_diff_grad(loss_fn: Callable[[ParamVector], float], theta: ParamVector,
                     h: float) -> NDArray[np.float64]:
    """
    Central-difference gradient with respect to each entry's search
    coordinate (log10 for log-scaled entries).
    """
    if not (h > 0.0):
        raise CalibrationError(f"Finite-difference step must be positive, got {h}.")
    s = theta.to_search()
    lower, upper = theta.search_bounds()
    if np.any(s - h < lower) or np.any(s + h > upper):
        raise CalibrationError("Finite-difference stencil leaves the parameter bounds.")

    def evaluate(job: Tuple[int, float]) -> float:
        i, sign = job
        point = s.copy()
        point[i] += sign * h
        try:
            return float(loss_fn(theta.from_search(point)))
        except Exception as exc:
            key = theta.entries[i].key
            raise CalibrationError(f"Loss evaluation failed for entry {key!r}: {exc}", key) from exc

    jobs = [(i, sign) for i in range(len(theta)) for sign in (1.0, -1.0)]
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        values = list(pool.map(evaluate, jobs))
    plus = np.array(values[0::2])
    minus = np.array(values[1::2])
    return (plus - minus) / (2.0 * h)


class _BudgetExhausted(Exception):
    pass


class TrajectoryObjective:
    """
    Simulation loss in search coordinates with an evaluation budget.
    Repeated points are served from a cache; failed simulations score +inf.
    """

    def __init__(self, scene: Scene, config: SimConfig, ref: Trajectory, template: ParamVector,
                 budget: int, on_evaluation: Optional[Callable[[int, ParamVector, float], None]] = None):
        self.scene = scene
        self.config = config
        self.ref = ref
        self.template = template
        self.budget = budget
        self.on_evaluation = on_evaluation
        self.frames = ref.frame_count - 1
        self.history: List[float] = []
        self.cache: Dict[bytes, float] = {}
        self.best_loss = math.inf
        self.best_theta = template

    def loss(self, theta: ParamVector) -> float:
        try:
            sim = simulate(apply_theta(self.scene, theta), self.config, self.frames)
            value = trajectory_loss(sim, self.ref)
        except ViscompmError as exc:
            logger.warning("Trial %s failed (%s); scored +inf.", theta.as_dict(), exc)
            return math.inf
        return value if math.isfinite(value) else math.inf

    def __call__(self, s: NDArray[np.float64], theta: Optional[ParamVector] = None) -> float:
        s = np.asarray(s, dtype=np.float64)
        key = s.tobytes()
        if key in self.cache:
            return self.cache[key]
        if len(self.history) >= self.budget:
            raise _BudgetExhausted()
        if theta is None:
            theta = self.template.from_search(s)
        value = self.loss(theta)
        self.cache[key] = value
        self.history.append(value)
        if value < self.best_loss:
            self.best_loss, self.best_theta = value, theta
        logger.info("evaluation %d: loss=%.6e best=%.6e %s",
                    len(self.history), value, self.best_loss, theta.as_dict())
        if self.on_evaluation is not None:
            self.on_evaluation(len(self.history) - 1, theta, value)
        return value


def initial_simplex(theta: ParamVector) -> NDArray[np.float64]:
    s = theta.to_search()
    lower, upper = theta.search_bounds()
    vertices = [s]
    for i in range(len(s)):
        step = SIMPLEX_STEP * (upper[i] - lower[i])
        vertex = s.copy()
        vertex[i] = s[i] + step if s[i] + step <= upper[i] else s[i] - step
        vertices.append(vertex)
    return np.array(vertices)


def calibrate(scene: Scene, config: SimConfig, ref: Trajectory, theta0: ParamVector,
              budget: int = DEFAULT_BUDGET,
              on_evaluation: Optional[Callable[[int, ParamVector, float], None]] = None,
              ) -> Tuple[ParamVector, List[float]]:
    """
    Downhill-simplex fit of theta0 against a reference trajectory.

    Each evaluation is a full deterministic simulation of
    ref.frame_count - 1 frames. The budget counts evaluations including the
    one at theta0 (a budget of 0 still scores theta0). After the first
    search stagnates the simplex is rebuilt once around the best point.

    Returns:
        tuple: (best theta seen, loss of every evaluation in order)
    """
    if budget < 0:
        raise CalibrationError(f"budget must be >= 0, got {budget}.")
    if not math.isclose(config.frame_dt, ref.frame_dt, rel_tol=1e-6):
        raise CalibrationError(
            f"Reference frame_dt {ref.frame_dt} does not match the configured {config.frame_dt}.")

    objective = TrajectoryObjective(scene, config, ref, theta0, max(budget, 1), on_evaluation)
    loss0 = objective(theta0.to_search(), theta0)
    lower, upper = theta0.search_bounds()
    options = {"xatol": 1e-3, "fatol": 1e-6 * loss0 if math.isfinite(loss0) else 1e-12,
               "maxfev": 10 * max(budget, 1)}

    try:
        for attempt in range(2):
            if len(objective.history) >= objective.budget:
                break
            start = objective.best_theta
            result = minimize(objective, start.to_search(), method="Nelder-Mead",
                              bounds=Bounds(lower, upper),
                              options=dict(options, initial_simplex=initial_simplex(start)))
            logger.info("Simplex search %d stopped: %s", attempt + 1, result.message)
    except _BudgetExhausted:
        logger.info("Evaluation budget of %d exhausted.", objective.budget)

    logger.info("Best loss %.6e after %d evaluations (initial %.6e).",
                objective.best_loss, len(objective.history), loss0)
    return objective.best_theta, list(objective.history)


def best_so_far(history: Sequence[float]) -> List[float]:
    return list(np.minimum.accumulate(np.asarray(history, dtype=np.float64))) if history else []
