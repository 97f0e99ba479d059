import struct

import numpy as np
import pytest

from constitutive import ElasticParams, Material, ViscoParams
from mpm import SimConfig, simulate
from scene import (
    Box, FillSpec, ImpulseSpec, MaterialRegion, SceneError, SceneSpec, apply_impulse_and_anchors,
    assign_mass_volume, build_scene, internal_fill, load_particles, material_index,
)

CONFIG = SimConfig(grid_dims=(16, 16, 16), dx=1.0 / 16, dt=1e-4, substeps_per_frame=10)


def make_material(youngs_e=1e3):
    elastic = ElasticParams(youngs_e, 0.3)
    return Material(elastic, ViscoParams.from_elastic(elastic))


def fibonacci_sphere(n, radius=0.2, center=(0.5, 0.5, 0.5)):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    unit = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return np.asarray(center) + radius * unit


def cube_points(per_axis=4, center=0.5, spacing=1.0 / 32):
    axis = (np.arange(per_axis) - (per_axis - 1) / 2) * spacing + center
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def test_load_csv_with_header_and_comments(tmp_path):
    path = tmp_path / "cloud.csv"
    path.write_text("x,y,z\n# a comment\n0.1,0.2,0.3\n\n0.4, 0.5, 0.6\n")
    points = load_particles(str(path))
    assert points.tolist() == [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]


def test_load_csv_reports_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.1,0.2,0.3\n0.4,0.5\n")
    with pytest.raises(SceneError) as info:
        load_particles(str(path))
    assert info.value.line == 2
    assert "line 2" in str(info.value)


def test_load_csv_rejects_non_numeric(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.1,0.2,0.3\n0.4,abc,0.6\n")
    with pytest.raises(SceneError, match="line 2"):
        load_particles(str(path))


def test_load_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("x,y,z\n")
    with pytest.raises(SceneError, match="no particles"):
        load_particles(str(path))


def test_load_ascii_ply(tmp_path):
    path = tmp_path / "cloud.ply"
    path.write_text(
        "ply\nformat ascii 1.0\ncomment made by hand\n"
        "element vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float opacity\n"
        "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
        "0.1 0.2 0.3 1.0\n0.4 0.5 0.6 0.5\n")
    points = load_particles(str(path))
    assert np.allclose(points, [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])


def test_load_binary_ply_ignores_extra_properties(tmp_path):
    path = tmp_path / "cloud.ply"
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
              "property float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n")
    body = struct.pack("<fffB", 0.25, 0.5, 0.75, 255) + struct.pack("<fffB", 1.0, 2.0, 3.0, 0)
    path.write_bytes(header.encode("ascii") + body)
    points = load_particles(str(path))
    assert points.tolist() == [[0.25, 0.5, 0.75], [1.0, 2.0, 3.0]]


def test_truncated_binary_ply_rejected(tmp_path):
    path = tmp_path / "short.ply"
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 3\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    path.write_bytes(header.encode("ascii") + struct.pack("<fff", 0.0, 0.0, 0.0))
    with pytest.raises(SceneError, match="3 vertices"):
        load_particles(str(path))


def test_fill_hollow_sphere():
    shell = fibonacci_sphere(3000)
    fill = FillSpec(voxel_resolution=(10, 10, 10), seed_per_voxel=1)
    filled = internal_fill(shell, fill, seed=0)
    assert filled.shape[0] > shell.shape[0]
    assert np.array_equal(filled[:shell.shape[0]], shell)
    seeded = filled[shell.shape[0]:]
    extent = shell.max(axis=0) - shell.min(axis=0)
    offset = np.abs(seeded.mean(axis=0) - shell.mean(axis=0)) / extent
    assert np.all(offset <= 0.05)
    # seeded voxels lie inside the shell, up to voxels the shell only grazes
    assert np.all(np.linalg.norm(seeded - 0.5, axis=1) < 0.21)


def test_fill_is_idempotent():
    fill = FillSpec(voxel_resolution=(10, 10, 10))
    filled = internal_fill(fibonacci_sphere(3000), fill, seed=3)
    again = internal_fill(filled, fill, seed=3)
    assert again.shape == filled.shape


def test_fill_is_seeded():
    fill = FillSpec(voxel_resolution=(10, 10, 10), seed_per_voxel=2)
    first = internal_fill(fibonacci_sphere(3000), fill, seed=7)
    second = internal_fill(fibonacci_sphere(3000), fill, seed=7)
    assert np.array_equal(first, second)


def test_fill_solid_cloud_adds_nothing():
    points = cube_points(per_axis=10)
    filled = internal_fill(points, FillSpec(voxel_resolution=(8, 8, 8)))
    assert filled.shape == points.shape


def test_fill_rejects_degenerate_input():
    flat = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    with pytest.raises(SceneError):
        internal_fill(flat, FillSpec())
    with pytest.raises(SceneError):
        FillSpec(voxel_resolution=(4, 32, 32))


def test_mass_and_volume_split_per_cell():
    dx = CONFIG.dx
    corner = np.array([8.0, 8.0, 8.0]) * dx
    shared = corner + dx * np.array([[0.25, 0.25, 0.25], [0.75, 0.25, 0.25], [0.25, 0.75, 0.75], [0.6, 0.6, 0.6]])
    alone = corner + dx * np.array([[1.5, 0.5, 0.5]])
    mass, volume0 = assign_mass_volume(np.concatenate([shared, alone]), CONFIG, rho=100.0)
    assert np.allclose(volume0, [dx ** 3 / 4] * 4 + [dx ** 3])
    assert np.allclose(mass, 100.0 * volume0)
    assert np.isclose(volume0.sum(), 2 * dx ** 3)


def test_material_index_last_region_wins():
    spec = SceneSpec(density_rho=100.0, material=make_material(), regions=(
        MaterialRegion("left", Box((0.0, 0.0, 0.0), (0.5, 1.0, 1.0)), make_material(2e3)),
        MaterialRegion("corner", Box((0.0, 0.0, 0.0), (0.3, 0.3, 1.0)), make_material(3e3)),
    ))
    points = np.array([[0.7, 0.5, 0.5], [0.4, 0.5, 0.5], [0.2, 0.2, 0.5]])
    assert material_index(points, spec).tolist() == [0, 1, 2]


def test_region_materials_reach_particles():
    spec = SceneSpec(density_rho=100.0, material=make_material(), regions=(
        MaterialRegion("left", Box((0.0, 0.0, 0.0), (0.5, 1.0, 1.0)), make_material(2e3)),
    ))
    scene = build_scene(spec, points=cube_points())
    particles = scene.instantiate(CONFIG)
    left = particles.x[:, 0] <= 0.5
    assert np.all(particles.material.lame_mu[left] == make_material(2e3).elastic.lame_mu)
    assert np.all(particles.material.lame_mu[~left] == make_material().elastic.lame_mu)


def test_impulse_and_anchor_masks():
    spec = SceneSpec(
        density_rho=100.0, material=make_material(),
        anchors=(Box((0.0, 0.0, 0.0), (1.0, 1.0, 0.46)),),
        impulses=(ImpulseSpec(Box((0.5, 0.0, 0.0), (1.0, 1.0, 1.0)), (2.0, 0.0, 0.0), 0, 1),),
    )
    scene = build_scene(spec, points=cube_points())
    particles = scene.instantiate(CONFIG)
    particles.v[:] = 1.0
    apply_impulse_and_anchors(particles, 0, spec)
    pushed = particles.x[:, 0] >= 0.5
    assert np.all(particles.ext_accel[pushed] == [2.0, 0.0, 0.0])
    assert np.all(particles.ext_accel[~pushed] == 0.0)
    low = particles.x[:, 2] <= 0.46
    assert particles.anchored.tolist() == low.tolist()
    assert np.all(particles.v[low] == 0.0)
    apply_impulse_and_anchors(particles, 2, spec)
    assert np.all(particles.ext_accel == 0.0)


def test_anchored_particles_do_not_move():
    spec = SceneSpec(density_rho=100.0, material=make_material(),
                     anchors=(Box((0.0, 0.0, 0.0), (1.0, 1.0, 0.46)),))
    scene = build_scene(spec, points=cube_points())
    trajectory = simulate(scene, CONFIG, 3)
    low = scene.points[:, 2] <= 0.46
    displacement = np.abs(trajectory.frames[-1] - trajectory.frames[0])
    assert np.max(displacement[low]) <= 1e-12
    assert np.max(displacement[~low]) > 0.0


def test_initial_velocity_and_stretch():
    spec = SceneSpec(density_rho=100.0, material=make_material(),
                     initial_velocity=(0.1, 0.0, 0.0), initial_stretch=(1.1, 1.0, 1.0))
    points = cube_points()
    particles = build_scene(spec, points=points).instantiate(CONFIG)
    rest_mass, _ = assign_mass_volume(points, CONFIG, 100.0)
    assert np.array_equal(particles.mass, rest_mass)
    assert np.allclose(particles.x[:, 0] - 0.5, 1.1 * (points[:, 0] - 0.5))
    assert np.allclose(particles.f_e, np.diag([1.1, 1.0, 1.0]))
    assert np.allclose(particles.f_n, np.diag([1.1, 1.0, 1.0]))
    assert np.all(particles.v == [0.1, 0.0, 0.0])


def test_boxes_outside_domain_rejected():
    spec = SceneSpec(density_rho=100.0, material=make_material(),
                     anchors=(Box((2.0, 2.0, 2.0), (3.0, 3.0, 3.0)),))
    with pytest.raises(SceneError, match="anchors"):
        build_scene(spec, points=cube_points()).instantiate(CONFIG)


def test_build_scene_does_not_touch_caller_array():
    points = cube_points()
    scene = build_scene(SceneSpec(density_rho=100.0, material=make_material()), points=points)
    assert points.flags.writeable
    assert not scene.points.flags.writeable


def test_scene_spec_validation():
    with pytest.raises(SceneError):
        SceneSpec(density_rho=0.0, material=make_material())
    with pytest.raises(SceneError):
        Box((1.0, 0.0, 0.0), (0.0, 1.0, 1.0))
    with pytest.raises(SceneError):
        ImpulseSpec(Box((0, 0, 0), (1, 1, 1)), (0, 0, 1), start_frame=3, end_frame=1)


def test_impulse_adds_to_gravity_in_com_acceleration():
    spec = SceneSpec(density_rho=100.0, material=make_material(),
                     impulses=(ImpulseSpec(Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), (3.0, -2.0, 1.5), 0, 0),))
    scene = build_scene(spec, points=cube_points())
    mass = scene.instantiate(CONFIG).mass
    trajectory = simulate(scene, CONFIG, 2, record_velocities=True)
    com_v = np.einsum("p,fpj->fj", mass, trajectory.velocities) / mass.sum()
    accel = np.diff(com_v, axis=0) / CONFIG.frame_dt
    g = np.array(CONFIG.gravity)
    assert np.allclose(accel[0], g + [3.0, -2.0, 1.5], rtol=0, atol=1e-6)
    # the impulse window has closed by frame 1
    assert np.allclose(accel[1], g, rtol=0, atol=1e-6)


def test_non_relaxing_materials_are_reported(caplog):
    elastic = ElasticParams(1e3, 0.3)
    spec = SceneSpec(density_rho=100.0, material=make_material(), regions=(
        MaterialRegion("soft", Box((0.0, 0.0, 0.0), (0.5, 1.0, 1.0)),
                       Material(elastic, ViscoParams.from_elastic(elastic, nu_d=5.0))),
    ))
    with caplog.at_level("DEBUG", logger="scene"):
        build_scene(spec, points=cube_points()).instantiate(CONFIG)
    assert "Material 'default' never relaxes" in caplog.text
    assert "'soft'" not in caplog.text
