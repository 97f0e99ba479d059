"""
Scene Module - particle ingestion and scene construction
Loads particle clouds (CSV or PLY), fills hollow shells, assigns mass and
initial volume, resolves per-region materials and applies per-frame
impulses and anchors.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from constitutive import Material, MaterialField
from mpm import ParticleState, SimConfig, check_interior
from tensor3 import ViscompmError, diag3

logger = logging.getLogger(__name__)

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class SceneError(ViscompmError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in meters."""
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(c) for c in self.lo))
        object.__setattr__(self, "hi", tuple(float(c) for c in self.hi))
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise SceneError("Box corners need three coordinates each.")
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise SceneError(f"Box lower corner {self.lo} exceeds upper corner {self.hi}.")

    def contains(self, points: NDArray[np.float64]) -> NDArray[np.bool_]:
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)

    def intersects(self, lo, hi) -> bool:
        return bool(np.all(np.asarray(self.lo) <= hi) and np.all(np.asarray(self.hi) >= lo))


@dataclass(frozen=True)
class FillSpec:
    voxel_resolution: Tuple[int, int, int] = (32, 32, 32)
    seed_per_voxel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "voxel_resolution", tuple(int(n) for n in self.voxel_resolution))
        if len(self.voxel_resolution) != 3 or not all(8 <= n <= 256 for n in self.voxel_resolution):
            raise SceneError(f"voxel_resolution must be three integers in [8, 256], got {self.voxel_resolution}.")
        if self.seed_per_voxel < 1:
            raise SceneError(f"seed_per_voxel must be >= 1, got {self.seed_per_voxel}.")


@dataclass(frozen=True)
class ImpulseSpec:
    region: Box
    acceleration: Tuple[float, float, float]
    start_frame: int = 0
    end_frame: int = 0

    def __post_init__(self):
        object.__setattr__(self, "acceleration", tuple(float(a) for a in self.acceleration))
        if self.start_frame > self.end_frame:
            raise SceneError(f"Impulse start_frame {self.start_frame} is after end_frame {self.end_frame}.")

    def active(self, frame: int) -> bool:
        return self.start_frame <= frame <= self.end_frame


@dataclass(frozen=True)
class MaterialRegion:
    name: str
    box: Box
    material: Material


@dataclass(frozen=True)
class SceneSpec:
    density_rho: float
    material: Material
    particle_source: Optional[str] = None
    fill: Optional[FillSpec] = None
    anchors: Tuple[Box, ...] = ()
    impulses: Tuple[ImpulseSpec, ...] = ()
    regions: Tuple[MaterialRegion, ...] = ()
    initial_velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    initial_stretch: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not (self.density_rho > 0.0):
            raise SceneError(f"density_rho must be positive, got {self.density_rho}.")
        if any(s <= 0.0 for s in self.initial_stretch):
            raise SceneError(f"initial_stretch entries must be positive, got {self.initial_stretch}.")
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise SceneError(f"Material region names must be unique, got {names}.")

    def region_names(self) -> List[str]:
        return [r.name for r in self.regions]


def _load_csv(path: str) -> NDArray[np.float64]:
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if lineno == 1 and text.replace(" ", "").lower() == "x,y,z":
                continue
            fields = text.split(",")
            if len(fields) != 3:
                raise SceneError(f"expected 3 comma-separated values, got {len(fields)}", lineno)
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise SceneError(f"non-numeric value in {text!r}", lineno)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _read_ply_header(handle) -> Tuple[str, List[Tuple[str, int, List[Tuple[str, str]]]], int]:
    """Returns (format, elements, header line count); elements are (name, count, [(type, name)])."""
    first = handle.readline()
    if first.strip() != b"ply":
        raise SceneError("missing 'ply' magic", 1)
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = handle.readline()
        lineno += 1
        if not raw:
            raise SceneError("header ended without end_header", lineno)
        try:
            words = raw.decode("ascii").split()
        except UnicodeDecodeError:
            raise SceneError("PLY header is not ASCII", lineno)
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3:
                raise SceneError("malformed element line", lineno)
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise SceneError("property before any element", lineno)
            if words[1] == "list":
                elements[-1][2].append(("list", words[-1]))
            elif len(words) == 3 and words[1] in PLY_TYPES:
                elements[-1][2].append((words[1], words[2]))
            else:
                raise SceneError(f"unsupported property {' '.join(words[1:])!r}", lineno)
        elif words[0] == "end_header":
            return fmt, elements, lineno


def _load_ply(path: str) -> NDArray[np.float64]:
    with open(path, "rb") as handle:
        fmt, elements, header_lines = _read_ply_header(handle)
        body = handle.read()

    if fmt not in ("ascii", "binary_little_endian"):
        raise SceneError(f"unsupported PLY format {fmt!r}")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise SceneError("PLY file has no vertex element")
    vertex_pos = names.index("vertex")
    _, count, props = elements[vertex_pos]
    prop_names = [p[1] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise SceneError(f"vertex element lacks property {axis!r}")

    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        start = sum(e[1] for e in elements[:vertex_pos])
        cols = [prop_names.index(a) for a in ("x", "y", "z")]
        points = np.empty((count, 3))
        for i in range(count):
            lineno = header_lines + start + i + 1
            if start + i >= len(lines):
                raise SceneError(f"expected {count} vertices, file ends early", lineno)
            words = lines[start + i].split()
            try:
                points[i] = [float(words[c]) for c in cols]
            except (ValueError, IndexError):
                raise SceneError(f"malformed vertex {i}", lineno)
        return points

    offset = 0
    for name, n, eprops in elements[:vertex_pos]:
        if any(t == "list" for t, _ in eprops):
            raise SceneError(f"list property in element {name!r} preceding vertices is unsupported")
        offset += n * int(np.dtype([(p, "<" + PLY_TYPES[t]) for t, p in eprops]).itemsize)
    if any(t == "list" for t, _ in props):
        raise SceneError("list properties on vertices are unsupported")
    dtype = np.dtype([(p, "<" + PLY_TYPES[t]) for t, p in props])
    needed = offset + count * dtype.itemsize
    if len(body) < needed:
        raise SceneError(f"binary body holds {len(body)} bytes, need {needed} for {count} vertices")
    data = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
    return np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)


def load_particles(path: str) -> NDArray[np.float64]:
    """
    Read particle positions from CSV (x,y,z per line) or PLY (ASCII or
    binary little endian; vertex x, y, z, other properties ignored).

    Returns:
        array of shape (N, 3)
    """
    with open(path, "rb") as handle:
        magic = handle.read(3)
    points = _load_ply(path) if magic == b"ply" else _load_csv(path)
    if points.shape[0] == 0:
        raise SceneError(f"{path} contains no particles")
    if not np.all(np.isfinite(points)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(points), axis=1))[0])
        raise SceneError(f"particle {bad} has a non-finite coordinate")
    logger.info("Loaded %d particles from %s", points.shape[0], path)
    return points


def _voxel_index(points, lo, size, res) -> NDArray[np.int64]:
    idx = np.floor((points - lo) / size).astype(np.int64)
    return np.clip(idx, 0, np.asarray(res) - 1)


def internal_fill(points, fill: FillSpec, seed: int = 0) -> NDArray[np.float64]:
    """
    Seed particles inside a closed shell.

    The bounding box is voxelized; voxels holding input points form the
    shell, background voxels face-connected (6-neighbourhood) to the box
    border are exterior, the rest are interior and get `seed_per_voxel`
    jittered points each.

    Returns:
        input points followed by the seeded points
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise SceneError("internal_fill needs a non-empty point set")
    if pts.shape[0] < 4 or np.linalg.matrix_rank(pts - pts.mean(axis=0)) < 3:
        raise SceneError("internal_fill needs at least 4 non-coplanar points")

    res = np.asarray(fill.voxel_resolution)
    lo = pts.min(axis=0)
    size = (pts.max(axis=0) - lo) / res
    shell = np.zeros(tuple(res), dtype=bool)
    shell[tuple(_voxel_index(pts, lo, size, res).T)] = True

    interior = ndimage.binary_fill_holes(shell) & ~shell
    cells = np.argwhere(interior)
    if cells.shape[0] == 0:
        logger.warning("Nothing to fill: no enclosed voxels at resolution %s.", tuple(res))
        return pts.copy()

    rng = np.random.default_rng(seed)
    # keep seeds off voxel faces so refilling maps them back to the same voxel
    jitter = 0.05 + 0.9 * rng.random((cells.shape[0], fill.seed_per_voxel, 3))
    seeded = lo + (cells[:, None, :] + jitter) * size
    logger.info("Filled %d interior voxels with %d particles.", cells.shape[0], seeded.shape[0] * seeded.shape[1])
    return np.concatenate([pts, seeded.reshape(-1, 3)])


def assign_mass_volume(points, config: SimConfig,
                       rho: float) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Split each occupied simulation cell's volume dx^3 evenly among its particles.

    Returns:
        tuple: (mass kg, volume0 m^3), each shape (N,)
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    check_interior(pts, config)
    cells = np.floor(pts / config.dx).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).reshape(-1)
    volume0 = config.dx ** 3 / counts[inverse]
    return rho * volume0, volume0


def material_index(points, spec: SceneSpec) -> NDArray[np.int64]:
    """0 for the default material, i + 1 for the last region i containing the point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    index = np.zeros(pts.shape[0], dtype=np.int64)
    for i, region in enumerate(spec.regions):
        index[region.box.contains(pts)] = i + 1
    return index


def apply_impulse_and_anchors(particles: ParticleState, frame: int, spec: SceneSpec) -> None:
    """
    Set this frame's external accelerations and anchor mask.

    Particles inside an active impulse box get its acceleration for the
    frame's substeps; particles inside an anchor box are pinned (velocity
    zeroed now and after every g2p).
    """
    particles.ext_accel[:] = 0.0
    for impulse in spec.impulses:
        if impulse.active(frame):
            particles.ext_accel[impulse.region.contains(particles.x)] += impulse.acceleration
    anchored = np.zeros(particles.count, dtype=bool)
    for box in spec.anchors:
        anchored |= box.contains(particles.x)
    particles.anchored[:] = anchored
    particles.v[anchored] = 0.0


@dataclass(frozen=True)
class Scene:
    """A scene spec together with its resolved rest-state point cloud."""
    spec: SceneSpec
    points: NDArray[np.float64]

    def materials(self) -> List[Material]:
        return [self.spec.material] + [r.material for r in self.spec.regions]

    def with_materials(self, material: Material, region_materials: Sequence[Material]) -> "Scene":
        regions = tuple(replace(r, material=m) for r, m in zip(self.spec.regions, region_materials))
        return replace(self, spec=replace(self.spec, material=material, regions=regions))

    def validate(self, config: SimConfig) -> None:
        lo, hi = config.interior_bounds
        for i, box in enumerate(self.spec.anchors):
            if not box.intersects(lo, hi):
                raise SceneError(f"anchors[{i}] does not intersect the simulation domain")
        for i, impulse in enumerate(self.spec.impulses):
            if not impulse.region.intersects(lo, hi):
                raise SceneError(f"impulses[{i}].region does not intersect the simulation domain")
        for name, material in zip(["default"] + self.spec.region_names(), self.materials()):
            if material.visco_enabled and not material.visco.dissipative:
                logger.debug("Material '%s' never relaxes: its viscoelastic branch acts as a second elastic branch.",
                            name)

    def instantiate(self, config: SimConfig) -> ParticleState:
        self.validate(config)
        mass, volume0 = assign_mass_volume(self.points, config, self.spec.density_rho)
        material = MaterialField.from_materials(self.materials(), material_index(self.points, self.spec))
        stretch = np.asarray(self.spec.initial_stretch, dtype=np.float64)
        centroid = self.points.mean(axis=0)
        x = centroid + (self.points - centroid) * stretch
        particles = ParticleState.create(x, mass, volume0, material, v=self.spec.initial_velocity)
        if np.any(stretch != 1.0):
            particles.f_e[:] = diag3(stretch)
            particles.f_n[:] = diag3(stretch)
        return particles

    def prepare_frame(self, particles: ParticleState, frame: int) -> None:
        apply_impulse_and_anchors(particles, frame, self.spec)


def build_scene(spec: SceneSpec, points=None, seed: int = 0) -> Scene:
    """Load (unless `points` is given) and optionally fill the particle cloud."""
    if points is None:
        if spec.particle_source is None:
            raise SceneError("SceneSpec has no particle_source and no points were given")
        points = load_particles(spec.particle_source)
    points = np.array(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise SceneError("scene has no particles")
    if spec.fill is not None:
        points = internal_fill(points, spec.fill, seed)
    points.flags.writeable = False
    return Scene(spec, points)
