"""
MPM Module - hybrid particle-grid integrator
One substep is: clear grid -> P2G -> grid update (internal force, gravity,
external accelerations, boundaries) -> G2P (velocity, position, affine
matrix, velocity gradient, both deformation-gradient branches).

Particles are stored struct-of-arrays; the grid is a dense array of nodes
flattened to one index so scatters are plain `np.bincount` calls, which sum
in a fixed order.
"""

import functools
import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Protocol, Tuple

import numpy as np
from numpy.typing import NDArray

from constitutive import (
    ClampCounter, MaterialField, corotated_energy, field_ab, hencky_energy,
    total_stress, viscous_return_map,
)
from tensor3 import DomainError, InvertedElementError, ViscompmError

logger = logging.getLogger(__name__)

BSPLINE_DEGREE = 2
# 12 / (b + 1) for the quadratic B-spline, i.e. the 4 / dx^2 of MLS-MPM once divided by dx^2.
APIC_FACTOR = 12.0 / (BSPLINE_DEGREE + 1)
ZERO_MASS = 1e-12

THREADS_ENV = "VISCOMPM_THREADS"

_STENCIL_OFFSETS = np.array(list(itertools.product(range(3), repeat=3)), dtype=np.int64)


def worker_threads() -> int:
    """Thread cap from VISCOMPM_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r.", THREADS_ENV, raw)
        return 1


class OutOfDomainError(ViscompmError):
    def __init__(self, message: str, particle_id: int):
        super().__init__(message)
        self.particle_id = particle_id


class SimulationAbort(ViscompmError):
    """CFL violation, NaN or inverted element during a run."""

    def __init__(self, message: str, frame: Optional[int] = None, substep: Optional[int] = None):
        super().__init__(message)
        self.reason = message
        self.frame = frame
        self.substep = substep

    def __str__(self) -> str:
        where = ""
        if self.frame is not None and self.substep is not None:
            where = f" (frame {self.frame}, substep {self.substep})"
        elif self.frame is not None:
            where = f" (frame {self.frame})"
        return f"{self.reason}{where}"


class BoundaryPolicy(str, Enum):
    STICKY = "sticky"
    SLIP = "slip"


@dataclass(frozen=True)
class SimConfig:
    grid_dims: Tuple[int, int, int] = (50, 50, 50)
    dx: float = 0.02
    dt: float = 1e-4
    substeps_per_frame: int = 400
    gravity: Tuple[float, float, float] = (0.0, 0.0, -9.8)
    boundary_margin: int = 3
    boundary_policy: BoundaryPolicy = BoundaryPolicy.STICKY
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid_dims", tuple(int(n) for n in self.grid_dims))
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        object.__setattr__(self, "boundary_policy", BoundaryPolicy(self.boundary_policy))
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 8:
            raise DomainError(f"grid_dims must be three integers >= 8, got {self.grid_dims}.")
        if not (self.dx > 0.0):
            raise DomainError(f"dx must be positive, got {self.dx}.")
        if not (self.dt > 0.0):
            raise DomainError(f"dt must be positive, got {self.dt}.")
        if self.substeps_per_frame < 1:
            raise DomainError(f"substeps_per_frame must be >= 1, got {self.substeps_per_frame}.")
        if len(self.gravity) != 3:
            raise DomainError(f"gravity must have three components, got {self.gravity}.")
        if self.boundary_margin < 2:
            raise DomainError(f"boundary_margin must be >= 2, got {self.boundary_margin}.")
        if 2 * self.boundary_margin >= min(self.grid_dims):
            raise DomainError("boundary_margin leaves no interior cells.")

    @property
    def frame_dt(self) -> float:
        return self.dt * self.substeps_per_frame

    @property
    def node_count(self) -> int:
        nx, ny, nz = self.grid_dims
        return nx * ny * nz

    @property
    def gravity_vec(self) -> NDArray[np.float64]:
        return np.asarray(self.gravity, dtype=np.float64)

    @property
    def interior_bounds(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Lower and upper corners (m) of the region particles may occupy."""
        dims = np.asarray(self.grid_dims, dtype=np.float64)
        return (np.full(3, self.boundary_margin * self.dx),
                (dims - self.boundary_margin) * self.dx)


@dataclass
class ParticleState:
    x: NDArray[np.float64]
    v: NDArray[np.float64]
    c: NDArray[np.float64]
    f_e: NDArray[np.float64]
    f_n: NDArray[np.float64]
    mass: NDArray[np.float64]
    volume0: NDArray[np.float64]
    material: MaterialField
    ext_accel: NDArray[np.float64] = None
    anchored: NDArray[np.bool_] = None
    clamps: ClampCounter = field(default_factory=ClampCounter)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.ext_accel is None:
            self.ext_accel = np.zeros((n, 3))
        if self.anchored is None:
            self.anchored = np.zeros(n, dtype=bool)

    @classmethod
    def create(cls, x, mass, volume0, material: MaterialField, v=None) -> "ParticleState":
        """Rest state: F_E = F_N = I, C = 0."""
        x = np.array(x, dtype=np.float64).reshape(-1, 3)
        n = x.shape[0]
        mass = np.array(mass, dtype=np.float64).reshape(n)
        volume0 = np.array(volume0, dtype=np.float64).reshape(n)
        if np.any(mass <= 0.0) or np.any(volume0 <= 0.0):
            raise DomainError("Particle mass and initial volume must be positive.")
        velocity = np.zeros((n, 3)) if v is None else np.array(np.broadcast_to(v, (n, 3)), dtype=np.float64)
        identity = np.broadcast_to(np.eye(3), (n, 3, 3))
        return cls(
            x=x, v=velocity, c=np.zeros((n, 3, 3)),
            f_e=identity.copy(), f_n=identity.copy(),
            mass=mass, volume0=volume0, material=material,
        )

    @property
    def count(self) -> int:
        return self.x.shape[0]

    def momentum(self) -> NDArray[np.float64]:
        return np.sum(self.mass[:, None] * self.v, axis=0)


class Stencil(NamedTuple):
    nodes: NDArray[np.int64]        # (N, 27) flat node index
    weights: NDArray[np.float64]    # (N, 27)
    gradients: NDArray[np.float64]  # (N, 27, 3)
    offsets: NDArray[np.float64]    # (N, 27, 3), x_i - x_p in meters


@dataclass
class Grid:
    dims: Tuple[int, int, int]
    mass: NDArray[np.float64]
    momentum: NDArray[np.float64]
    velocity: NDArray[np.float64]
    stencil: Optional[Stencil] = None

    @classmethod
    def empty(cls, config: SimConfig) -> "Grid":
        size = config.node_count
        return cls(config.grid_dims, np.zeros(size), np.zeros((size, 3)), np.zeros((size, 3)))

    def clear(self) -> None:
        self.mass[:] = 0.0
        self.momentum[:] = 0.0
        self.velocity[:] = 0.0
        self.stencil = None

    def node_positions(self, dx: float) -> NDArray[np.float64]:
        ijk = np.indices(self.dims).reshape(3, -1).T
        return ijk * dx


def check_interior(xp: NDArray[np.float64], config: SimConfig) -> None:
    lo, hi = config.interior_bounds
    outside = ~np.all((xp >= lo) & (xp <= hi), axis=-1)
    if np.any(outside):
        pid = int(np.flatnonzero(outside)[0])
        raise OutOfDomainError(
            f"Particle {pid} at {xp[pid].tolist()} lies outside the grid interior "
            f"[{lo.tolist()}, {hi.tolist()}].", pid,
        )


def bspline_stencil(xp, config: SimConfig) -> Stencil:
    """
    Quadratic B-spline weights and MLS gradients over the 3x3x3 stencil.

    grad w_ip = (4 / dx^2) w_ip (x_i - x_p).

    Raises:
        OutOfDomainError: a particle lies outside the interior
    """
    xp = np.atleast_2d(np.asarray(xp, dtype=np.float64))
    check_interior(xp, config)
    dx = config.dx
    gx = xp / dx
    base = np.floor(gx - 0.5).astype(np.int64)
    fx = gx - base
    # per-axis weights, shape (N, 3 offsets, 3 axes)
    w1 = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=1)
    ox, oy, oz = _STENCIL_OFFSETS.T
    weights = w1[:, ox, 0] * w1[:, oy, 1] * w1[:, oz, 2]
    ijk = base[:, None, :] + _STENCIL_OFFSETS[None, :, :]
    nodes = np.ravel_multi_index((ijk[..., 0], ijk[..., 1], ijk[..., 2]), config.grid_dims)
    offsets = (_STENCIL_OFFSETS[None, :, :] - fx[:, None, :]) * dx
    gradients = (APIC_FACTOR / (dx * dx)) * weights[..., None] * offsets
    return Stencil(nodes, weights, gradients, offsets)


def _bincount(nodes: NDArray[np.int64], values: NDArray[np.float64], size: int) -> NDArray[np.float64]:
    flat_nodes = nodes.ravel()
    if values.ndim == nodes.ndim:
        return np.bincount(flat_nodes, weights=values.ravel(), minlength=size)
    flat = values.reshape(-1, values.shape[-1])
    return np.stack(
        [np.bincount(flat_nodes, weights=flat[:, d], minlength=size) for d in range(flat.shape[1])],
        axis=1,
    )


@functools.lru_cache(maxsize=None)
def scatter_pool(threads: int) -> ThreadPoolExecutor:
    """Process-wide worker pool for threaded scatters, one per thread count."""
    return ThreadPoolExecutor(max_workers=threads, thread_name_prefix="scatter")


def scatter(nodes: NDArray[np.int64], values: NDArray[np.float64], size: int,
            deterministic: bool = True) -> NDArray[np.float64]:
    """
    Sum per-(particle, stencil node) values onto the flat grid.

    Deterministic mode reduces in particle order. Otherwise particle chunks
    are reduced on worker threads and added in completion order, which may
    change the last bits.
    """
    threads = worker_threads()
    if deterministic or threads == 1 or nodes.shape[0] < 2 * threads:
        return _bincount(nodes, values, size)

    chunks = np.array_split(np.arange(nodes.shape[0]), threads)
    pool = scatter_pool(threads)
    total = None
    futures = [pool.submit(_bincount, nodes[idx], values[idx], size) for idx in chunks]
    for future in as_completed(futures):
        part = future.result()
        total = part if total is None else total + part
    return total


def p2g(particles: ParticleState, grid: Grid, config: SimConfig) -> None:
    """Transfer mass and APIC momentum m_p (v_p + C_p (x_i - x_p)) to the grid."""
    stencil = bspline_stencil(particles.x, config)
    grid.stencil = stencil
    size = config.node_count
    wm = stencil.weights * particles.mass[:, None]
    affine = np.einsum("pij,pkj->pki", particles.c, stencil.offsets)
    momentum = wm[..., None] * (particles.v[:, None, :] + affine)
    grid.mass[:] = scatter(stencil.nodes, wm, size, config.deterministic)
    grid.momentum[:] = scatter(stencil.nodes, momentum, size, config.deterministic)


@functools.lru_cache(maxsize=8)
def boundary_masks(config: SimConfig) -> Tuple[NDArray[np.bool_], NDArray[np.bool_]]:
    """
    Flat node masks of the margin band: (any-axis band, per-axis band of shape (M, 3)).
    """
    ijk = np.indices(config.grid_dims).reshape(3, -1).T
    dims = np.asarray(config.grid_dims)
    per_axis = (ijk < config.boundary_margin) | (ijk >= dims - config.boundary_margin)
    return np.any(per_axis, axis=1), per_axis


def apply_boundary(velocity: NDArray[np.float64], config: SimConfig) -> None:
    band, per_axis = boundary_masks(config)
    if config.boundary_policy is BoundaryPolicy.STICKY:
        velocity[band] = 0.0
    else:
        velocity[per_axis] = 0.0


def grid_update(particles: ParticleState, grid: Grid, config: SimConfig) -> None:
    """
    v_i = (m_i v_i + dt f_i) / m_i + dt g on loaded nodes, with
    f_i = -sum_p V_p^0 tau_p grad w_ip + sum_p w_ip m_p a_p (external accelerations).
    """
    if grid.stencil is None:
        raise ViscompmError("grid_update called before p2g.")
    stencil = grid.stencil
    stress = total_stress(particles.f_e, particles.f_n, particles.material,
                          particles.material, particles.clamps)
    tau = stress.total
    internal = -particles.volume0[:, None, None] * np.einsum("pij,pkj->pki", tau, stencil.gradients)
    external = (stencil.weights * particles.mass[:, None])[..., None] * particles.ext_accel[:, None, :]
    force = scatter(stencil.nodes, internal + external, config.node_count, config.deterministic)

    loaded = grid.mass > ZERO_MASS
    velocity = np.zeros_like(grid.momentum)
    velocity[loaded] = (
        (grid.momentum[loaded] + config.dt * force[loaded]) / grid.mass[loaded, None]
        + config.dt * config.gravity_vec
    )
    if not np.all(np.isfinite(velocity)):
        raise SimulationAbort("Non-finite grid velocity after grid update.")
    apply_boundary(velocity, config)
    grid.velocity[:] = velocity


def clamp_to_interior(particles: ParticleState, config: SimConfig) -> int:
    """
    Clip positions into the interior box. A clipped particle also loses the
    velocity component carrying it out, so it is not clipped again next substep.
    """
    lo, hi = config.interior_bounds
    below = particles.x < lo
    above = particles.x > hi
    moved = int(np.count_nonzero(np.any(below | above, axis=1)))
    if moved:
        logger.warning("Clamped %d particle(s) back into the grid interior.", moved)
        np.clip(particles.x, lo, hi, out=particles.x)
        v = particles.v
        v[below & (v < 0.0)] = 0.0
        v[above & (v > 0.0)] = 0.0
        particles.clamps.interior += moved
    return moved


def g2p(particles: ParticleState, grid: Grid, config: SimConfig) -> None:
    """
    Gather grid velocities back to particles, in the order
    velocity -> position -> C -> grad v -> F_E, F_N (trial + viscous correction).
    Anchored particles keep zero velocity.
    """
    if grid.stencil is None:
        raise ViscompmError("g2p called before p2g.")
    stencil = grid.stencil
    dt = config.dt
    node_v = grid.velocity[stencil.nodes]
    weighted_v = stencil.weights[..., None] * node_v

    v = np.sum(weighted_v, axis=1)
    v[particles.anchored] = 0.0
    particles.v[:] = v
    particles.x += dt * v
    particles.c[:] = (APIC_FACTOR / (config.dx * config.dx)) * np.einsum(
        "pki,pkj->pij", weighted_v, stencil.offsets)
    grad_v = np.einsum("pki,pkj->pij", node_v, stencil.gradients)

    step = np.eye(3) + dt * grad_v
    particles.f_e[:] = step @ particles.f_e
    a, b = field_ab(particles.material, dt)
    particles.f_n[:] = viscous_return_map(step @ particles.f_n, a, b, particles.clamps)

    clamp_to_interior(particles, config)
    max_speed = float(np.max(np.linalg.norm(v, axis=1))) if particles.count else 0.0
    if not np.isfinite(max_speed):
        raise SimulationAbort("Non-finite particle velocity after g2p.")
    if max_speed * dt > config.dx:
        raise SimulationAbort(
            f"CFL violated: dt * max|v| = {max_speed * dt:.3e} m exceeds dx = {config.dx:.3e} m "
            f"(max|v| = {max_speed:.3e} m/s)."
        )


def substep(particles: ParticleState, grid: Grid, config: SimConfig) -> None:
    grid.clear()
    p2g(particles, grid, config)
    grid_update(particles, grid, config)
    g2p(particles, grid, config)


@dataclass(frozen=True)
class FrameDiagnostics:
    frame: int
    time: float
    kinetic_energy: float
    elastic_energy: float
    visco_energy: float
    max_speed: float
    singular_value_clamps: int
    interior_clamps: int

    @property
    def total_energy(self) -> float:
        return self.kinetic_energy + self.elastic_energy + self.visco_energy


def measure(particles: ParticleState, frame: int, time: float) -> FrameDiagnostics:
    """Energies (J), max speed (m/s) and cumulative clamp counters."""
    material = particles.material
    kinetic = 0.5 * float(np.sum(particles.mass * np.sum(particles.v ** 2, axis=1)))
    elastic = float(np.sum(particles.volume0 * corotated_energy(
        particles.f_e, material.lame_lambda, material.lame_mu)))
    visco = float(np.sum(particles.volume0 * hencky_energy(
        particles.f_n, material.lame_lambda_n, material.lame_mu_n)))
    speeds = np.linalg.norm(particles.v, axis=1)
    return FrameDiagnostics(
        frame=frame,
        time=time,
        kinetic_energy=kinetic,
        elastic_energy=elastic,
        visco_energy=visco,
        max_speed=float(np.max(speeds)) if speeds.size else 0.0,
        singular_value_clamps=particles.clamps.singular_values,
        interior_clamps=particles.clamps.interior,
    )


def _measure_tagged(particles: ParticleState, frame: int, time: float, substep: Optional[int],
                    abort_frame: Optional[int] = None) -> FrameDiagnostics:
    try:
        return measure(particles, frame, time)
    except InvertedElementError as exc:
        raise SimulationAbort(str(exc), frame if abort_frame is None else abort_frame, substep) from exc


@dataclass(frozen=True)
class Trajectory:
    """
    Position snapshots, shape (frames, particles, 3), frame_dt seconds apart.
    Arrays are made read-only so a returned trajectory can be shared.
    """
    frames: NDArray[np.float64]
    frame_dt: float
    diagnostics: Tuple[FrameDiagnostics, ...] = ()
    velocities: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise DomainError(f"Trajectory frames must have shape (T, N, 3), got {frames.shape}.")
        if not (self.frame_dt > 0.0):
            raise DomainError(f"frame_dt must be positive, got {self.frame_dt}.")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        if self.velocities is not None:
            velocities = np.array(self.velocities, dtype=np.float64)
            if velocities.shape != frames.shape:
                raise DomainError("Trajectory velocities must match the frame shape.")
            velocities.flags.writeable = False
            object.__setattr__(self, "velocities", velocities)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def particle_count(self) -> int:
        return self.frames.shape[1]


class SceneLike(Protocol):
    def instantiate(self, config: SimConfig) -> ParticleState: ...

    def prepare_frame(self, particles: ParticleState, frame: int) -> None: ...


def simulate(scene: SceneLike, config: SimConfig, frames: int,
             record_velocities: bool = False) -> Trajectory:
    """
    Run `frames` frames of `config.substeps_per_frame` substeps each.

    Returns:
        Trajectory: frames + 1 snapshots (the initial state first) with
        per-frame diagnostics

    Raises:
        SimulationAbort: CFL violation, NaN or inverted element, tagged with
        the frame and substep index
    """
    if frames < 0:
        raise DomainError(f"frames must be >= 0, got {frames}.")
    particles = scene.instantiate(config)
    grid = Grid.empty(config)
    positions: List[NDArray[np.float64]] = [particles.x.copy()]
    velocities: List[NDArray[np.float64]] = [particles.v.copy()]
    diagnostics = [_measure_tagged(particles, 0, 0.0, None)]

    for frame in range(frames):
        scene.prepare_frame(particles, frame)
        for step in range(config.substeps_per_frame):
            try:
                substep(particles, grid, config)
            except SimulationAbort as abort:
                abort.frame, abort.substep = frame, step
                raise
            except (InvertedElementError, OutOfDomainError) as exc:
                raise SimulationAbort(str(exc), frame, step) from exc
        positions.append(particles.x.copy())
        velocities.append(particles.v.copy())
        # energies see the state after the frame's last substep
        diag = _measure_tagged(particles, frame + 1, (frame + 1) * config.frame_dt,
                               config.substeps_per_frame - 1, abort_frame=frame)
        diagnostics.append(diag)
        logger.info("frame %d: E_total=%.6e J, max|v|=%.4e m/s",
                    frame + 1, diag.total_energy, diag.max_speed)

    return Trajectory(
        frames=np.stack(positions),
        frame_dt=config.frame_dt,
        diagnostics=tuple(diagnostics),
        velocities=np.stack(velocities) if record_velocities else None,
    )
