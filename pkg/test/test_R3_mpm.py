import numpy as np
import pytest

import mpm
from constitutive import (
    ElasticParams, Material, MaterialField, ViscoParams, corotated_energy, hencky_energy,
)
from mpm import (
    BoundaryPolicy, Grid, OutOfDomainError, ParticleState, SimConfig, SimulationAbort, Trajectory,
    apply_boundary, bspline_stencil, clamp_to_interior, g2p, grid_update, p2g, scatter, scatter_pool,
    simulate, substep,
)
from tensor3 import DomainError

SMALL = SimConfig(grid_dims=(16, 16, 16), dx=1.0 / 16, dt=1e-4, substeps_per_frame=10,
                  gravity=(0.0, 0.0, 0.0))


def material_field(n, youngs_e=1e3, nu_d=float("inf")):
    elastic = ElasticParams(youngs_e, 0.3)
    return MaterialField.from_materials([Material(elastic, ViscoParams.from_elastic(elastic, nu_d=nu_d))],
                                        np.zeros(n, dtype=np.int64))


def random_particles(n, config=SMALL, seed=0, velocity_scale=1.0):
    rng = np.random.default_rng(seed)
    lo, hi = config.interior_bounds
    x = rng.uniform(lo + 0.05, hi - 0.05, size=(n, 3))
    particles = ParticleState.create(x, rng.uniform(0.1, 1.0, n), np.full(n, 1e-5), material_field(n))
    particles.v[:] = velocity_scale * rng.normal(size=(n, 3))
    particles.c[:] = rng.normal(size=(n, 3, 3))
    return particles


def block(config=SMALL, per_axis=4, center=0.5):
    spacing = config.dx / 2
    axis = (np.arange(per_axis) - (per_axis - 1) / 2) * spacing + center
    x = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    n = x.shape[0]
    return ParticleState.create(x, np.full(n, 1e-3), np.full(n, spacing ** 3), material_field(n))


class StaticScene:
    def __init__(self, factory):
        self.factory = factory

    def instantiate(self, config):
        return self.factory()

    def prepare_frame(self, particles, frame):
        pass


def test_kernel_partition_of_unity_and_gradient_sum():
    rng = np.random.default_rng(1)
    lo, hi = SMALL.interior_bounds
    stencil = bspline_stencil(rng.uniform(lo, hi, size=(1000, 3)), SMALL)
    assert np.max(np.abs(stencil.weights.sum(axis=1) - 1.0)) <= 1e-12
    assert np.max(np.abs(stencil.gradients.sum(axis=1))) <= 1e-10 / SMALL.dx
    # first moment vanishes, so APIC transfers reproduce affine fields
    first = np.einsum("pk,pkj->pj", stencil.weights, stencil.offsets)
    assert np.max(np.abs(first)) <= 1e-14


def test_kernel_node_centered_weights():
    node = np.array([[6.0, 7.0, 8.0]]) * SMALL.dx
    w = bspline_stencil(node, SMALL).weights.reshape(3, 3, 3)
    w1 = np.array([1 / 8, 3 / 4, 1 / 8])
    assert np.allclose(w, np.einsum("i,j,k->ijk", w1, w1, w1), rtol=0, atol=1e-16)


def test_stencil_rejects_particles_outside_interior():
    with pytest.raises(OutOfDomainError) as info:
        bspline_stencil(np.array([[0.5, 0.5, 0.5], [0.01, 0.5, 0.5]]), SMALL)
    assert info.value.particle_id == 1


def test_p2g_conserves_mass_and_momentum():
    for seed in range(100):
        particles = random_particles(50, seed=seed)
        grid = Grid.empty(SMALL)
        p2g(particles, grid, SMALL)
        total_mass = particles.mass.sum()
        assert abs(grid.mass.sum() - total_mass) <= 1e-12 * total_mass
        momentum = particles.momentum()
        assert np.linalg.norm(grid.momentum.sum(axis=0) - momentum) <= 1e-10 * max(np.linalg.norm(momentum), 1.0)


def test_scatter_modes_agree(monkeypatch):
    monkeypatch.setenv("VISCOMPM_THREADS", "4")
    particles = random_particles(200, seed=4)
    stencil = bspline_stencil(particles.x, SMALL)
    values = stencil.weights * particles.mass[:, None]
    fixed = scatter(stencil.nodes, values, SMALL.node_count, deterministic=True)
    threaded = scatter(stencil.nodes, values, SMALL.node_count, deterministic=False)
    assert np.allclose(fixed, threaded, rtol=0, atol=1e-14)
    again = scatter(stencil.nodes, values, SMALL.node_count, deterministic=False)
    assert np.allclose(again, threaded, rtol=0, atol=1e-14)
    assert scatter_pool(4) is scatter_pool(4)


def test_g2p_reproduces_affine_velocity_field():
    particles = random_particles(20, seed=2, velocity_scale=0.0)
    particles.c[:] = 0.0
    grid = Grid.empty(SMALL)
    p2g(particles, grid, SMALL)
    a = np.array([[0.1, -0.2, 0.05], [0.3, 0.0, -0.1], [0.02, 0.04, -0.3]])
    b = np.array([0.01, -0.02, 0.03])
    grid.velocity[:] = grid.node_positions(SMALL.dx) @ a.T + b
    x0 = particles.x.copy()
    g2p(particles, grid, SMALL)
    assert np.allclose(particles.v, x0 @ a.T + b, atol=1e-12)
    assert np.allclose(particles.c, a, atol=1e-10)
    assert np.allclose(particles.f_e, np.eye(3) + SMALL.dt * a, atol=1e-12)
    # velocity first, then position with the new velocity
    assert np.allclose(particles.x, x0 + SMALL.dt * particles.v, atol=1e-15)


def test_uniform_grid_velocity_is_rigid_translation():
    particles = random_particles(20, seed=3, velocity_scale=0.0)
    grid = Grid.empty(SMALL)
    p2g(particles, grid, SMALL)
    grid.velocity[:] = [0.2, -0.1, 0.05]
    g2p(particles, grid, SMALL)
    assert np.allclose(particles.v, [0.2, -0.1, 0.05], atol=1e-14)
    assert np.allclose(particles.f_e, np.eye(3), atol=1e-12)
    assert np.allclose(particles.f_n, np.eye(3), atol=1e-12)


def test_rigid_translation_over_100_substeps():
    particles = block()
    particles.v[:] = [0.1, 0.05, -0.02]
    grid = Grid.empty(SMALL)
    for _ in range(100):
        substep(particles, grid, SMALL)
    assert np.max(np.abs(particles.f_e - np.eye(3))) <= 1e-9
    assert np.max(np.abs(particles.f_n - np.eye(3))) <= 1e-9
    assert np.allclose(particles.v, [0.1, 0.05, -0.02], atol=1e-9)


def test_equilibrium_is_a_fixed_point():
    particles = block()
    x0 = particles.x.copy()
    grid = Grid.empty(SMALL)
    for _ in range(10):
        substep(particles, grid, SMALL)
    assert np.max(np.abs(particles.v)) <= 1e-12
    assert np.allclose(particles.x, x0, rtol=0, atol=1e-15)
    assert np.allclose(particles.f_e, np.eye(3), rtol=0, atol=1e-15)


def test_free_fall_matches_symplectic_euler():
    config = SimConfig(grid_dims=(16, 16, 16), dx=1.0 / 16, dt=1e-4, gravity=(0.0, 0.0, -9.8))
    particles = ParticleState.create([[0.51, 0.48, 0.53]], [1.0], [1e-6], material_field(1))
    grid = Grid.empty(config)
    n = 100
    for _ in range(n):
        substep(particles, grid, config)
    g = -9.8
    assert np.isclose(particles.v[0, 2], n * config.dt * g, rtol=0, atol=1e-10)
    expected_z = 0.53 + config.dt ** 2 * g * n * (n + 1) / 2
    assert np.isclose(particles.x[0, 2], expected_z, rtol=0, atol=1e-10)
    assert np.allclose(particles.x[0, :2], [0.51, 0.48], atol=1e-12)


def test_internal_forces_conserve_momentum():
    particles = block()
    rng = np.random.default_rng(8)
    particles.f_e[:] = np.eye(3) + 0.05 * rng.normal(size=particles.f_e.shape)
    grid = Grid.empty(SMALL)
    p2g(particles, grid, SMALL)
    before = grid.momentum.sum(axis=0)
    grid_update(particles, grid, SMALL)
    after = (grid.mass[:, None] * grid.velocity).sum(axis=0)
    scale = np.abs(grid.mass[:, None] * grid.velocity).sum()
    assert np.linalg.norm(after - before) <= 1e-9 * scale


def test_sticky_boundary_zeroes_band():
    velocity = np.ones((SMALL.node_count, 3))
    apply_boundary(velocity, SMALL)
    v = velocity.reshape(16, 16, 16, 3)
    assert np.all(v[:3] == 0.0) and np.all(v[-3:] == 0.0)
    assert np.all(v[:, :, 2] == 0.0)
    assert np.all(v[3:13, 3:13, 3:13] == 1.0)


def test_slip_boundary_zeroes_normal_component_only():
    config = SimConfig(grid_dims=(16, 16, 16), dx=1.0 / 16, boundary_policy="slip")
    assert config.boundary_policy is BoundaryPolicy.SLIP
    velocity = np.ones((config.node_count, 3))
    apply_boundary(velocity, config)
    v = velocity.reshape(16, 16, 16, 3)
    assert v[0, 8, 8].tolist() == [0.0, 1.0, 1.0]
    assert v[8, 15, 8].tolist() == [1.0, 0.0, 1.0]
    assert v[0, 0, 8].tolist() == [0.0, 0.0, 1.0]
    assert v[8, 8, 8].tolist() == [1.0, 1.0, 1.0]


def test_cfl_violation_aborts():
    particles = block()
    particles.v[:] = [SMALL.dx / SMALL.dt * 2, 0.0, 0.0]
    with pytest.raises(SimulationAbort, match="CFL"):
        substep(particles, Grid.empty(SMALL), SMALL)


def test_simulate_tags_abort_with_frame_and_substep():
    def fast():
        particles = block()
        particles.v[:] = [SMALL.dx / SMALL.dt * 2, 0.0, 0.0]
        return particles

    with pytest.raises(SimulationAbort) as info:
        simulate(StaticScene(fast), SMALL, 3)
    assert info.value.frame == 0
    assert info.value.substep == 0
    assert "frame 0" in str(info.value)


def test_simulate_frame_count_and_diagnostics():
    trajectory = simulate(StaticScene(block), SMALL, 3, record_velocities=True)
    assert trajectory.frame_count == 4
    assert trajectory.particle_count == 64
    assert trajectory.frame_dt == pytest.approx(1e-3)
    assert [d.frame for d in trajectory.diagnostics] == [0, 1, 2, 3]
    assert trajectory.velocities.shape == trajectory.frames.shape
    assert not trajectory.frames.flags.writeable


def test_simulate_zero_frames_returns_initial_state():
    trajectory = simulate(StaticScene(block), SMALL, 0)
    assert trajectory.frame_count == 1
    assert np.array_equal(trajectory.frames[0], block().x)


def test_simulate_is_deterministic():
    def moving():
        particles = block()
        particles.v[:] = np.random.default_rng(5).normal(scale=0.2, size=particles.v.shape)
        return particles

    config = SimConfig(grid_dims=(16, 16, 16), dx=1.0 / 16, dt=1e-4, substeps_per_frame=10)
    first = simulate(StaticScene(moving), config, 3)
    second = simulate(StaticScene(moving), config, 3)
    assert np.array_equal(first.frames, second.frames)


def test_simconfig_validation():
    with pytest.raises(DomainError):
        SimConfig(dx=0.0)
    with pytest.raises(DomainError):
        SimConfig(grid_dims=(16, 16, 16), boundary_margin=8)
    with pytest.raises(ValueError):
        SimConfig(boundary_policy="bouncy")
    assert SimConfig().frame_dt == pytest.approx(0.04)


def test_trajectory_rejects_bad_shape():
    with pytest.raises(DomainError):
        Trajectory(frames=np.zeros((2, 3)), frame_dt=0.1)


def released_cube(config, material, per_axis=10, stretch=1.1):
    spacing = config.dx / 2
    axis = (np.arange(per_axis) - (per_axis - 1) / 2) * spacing + 0.5
    rest = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    n = rest.shape[0]

    def factory():
        x = 0.5 + (rest - 0.5) * [stretch, 1.0, 1.0]
        field = MaterialField.from_materials([material], np.zeros(n, dtype=np.int64))
        particles = ParticleState.create(x, np.full(n, 1000.0 * spacing ** 3), np.full(n, spacing ** 3), field)
        particles.f_e[:] = np.diag([stretch, 1.0, 1.0])
        particles.f_n[:] = np.diag([stretch, 1.0, 1.0])
        return particles

    return StaticScene(factory)


@pytest.mark.slow
def test_viscous_branch_dissipates_energy():
    config = SimConfig(grid_dims=(32, 32, 32), dx=1.0 / 32, dt=1e-4, substeps_per_frame=100,
                       gravity=(0.0, 0.0, 0.0))
    elastic = ElasticParams(1e4, 0.3)
    viscous = Material(elastic, ViscoParams.from_elastic(elastic, nu_d=150.0))
    undamped = Material(elastic, ViscoParams.from_elastic(elastic, coeff_a=1.0, coeff_b=0.0))
    assert viscous.visco.dissipative and not undamped.visco.dissipative

    damped_run = simulate(released_cube(config, viscous), config, 50)
    undamped_run = simulate(released_cube(config, undamped), config, 50)

    energy = [d.total_energy for d in damped_run.diagnostics]
    assert all(later <= earlier + 0.01 * energy[0] for earlier, later in zip(energy, energy[1:]))
    assert energy[-1] < 0.5 * undamped_run.diagnostics[-1].total_energy

    rest_width = 9 * config.dx / 2

    def envelope(run):
        return max(abs(np.ptp(frame[:, 0]) - rest_width) for frame in run.frames[40:])

    assert envelope(damped_run) < 0.5 * envelope(undamped_run)


def test_grid_force_is_negative_energy_gradient():
    rng = np.random.default_rng(11)
    x = np.array([[8.1, 7.85, 8.05]]) * SMALL.dx
    particles = ParticleState.create(x, [1e-3], [2e-4], material_field(1))
    particles.f_e[0] = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    particles.f_n[0] = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    grid = Grid.empty(SMALL)
    p2g(particles, grid, SMALL)
    grid_update(particles, grid, SMALL)
    nodes = grid.stencil.nodes[0]
    gradients = grid.stencil.gradients[0]
    # particle at rest and no gravity: v_i = dt f_i / m_i
    force = grid.velocity[nodes] * grid.mass[nodes, None] / SMALL.dt

    field = particles.material
    f_e, f_n = particles.f_e[0].copy(), particles.f_n[0].copy()

    def energy(step):
        return particles.volume0[0] * float(
            corotated_energy(step @ f_e, field.lame_lambda[0], field.lame_mu[0])
            + hencky_energy(step @ f_n, field.lame_lambda_n[0], field.lame_mu_n[0]))

    h = 1e-6
    expected = np.zeros((27, 3))
    for k in range(27):
        for d in range(3):
            # F -> (I + u_kd e_d grad w_k^T) F for a virtual displacement of node k
            bump = np.zeros((3, 3))
            bump[d] = gradients[k]
            expected[k, d] = -(energy(np.eye(3) + h * bump) - energy(np.eye(3) - h * bump)) / (2 * h)
    assert np.max(np.abs(force - expected)) <= 1e-3 * np.max(np.abs(expected))


def test_non_finite_velocity_on_band_node_aborts():
    lo, _ = SMALL.interior_bounds
    particles = block(center=lo[0] + 0.3 * SMALL.dx, per_axis=1)
    grid = Grid.empty(SMALL)
    p2g(particles, grid, SMALL)
    band_node = np.ravel_multi_index((SMALL.boundary_margin - 1,) * 3, SMALL.grid_dims)
    assert band_node in grid.stencil.nodes[0]
    grid.momentum[band_node] = np.nan
    with pytest.raises(SimulationAbort, match="Non-finite"):
        grid_update(particles, grid, SMALL)


def test_clamp_drops_outward_velocity():
    lo, hi = SMALL.interior_bounds
    particles = ParticleState.create([[lo[0] - 0.01, 0.5, hi[2] + 0.01], [0.5, 0.5, 0.5]],
                                     [1.0, 1.0], [1e-5, 1e-5], material_field(2))
    particles.v[:] = [[-0.3, 0.2, 0.4], [-0.3, 0.2, 0.4]]
    assert clamp_to_interior(particles, SMALL) == 1
    assert particles.x[0].tolist() == [lo[0], 0.5, hi[2]]
    assert particles.v[0].tolist() == [0.0, 0.2, 0.0]
    assert particles.v[1].tolist() == [-0.3, 0.2, 0.4]
    assert particles.clamps.interior == 1


def test_inverted_element_at_frame_end_is_tagged(monkeypatch):
    real_substep = mpm.substep
    calls = []

    def inverting_substep(particles, grid, config):
        real_substep(particles, grid, config)
        calls.append(1)
        if len(calls) == config.substeps_per_frame:
            particles.f_e[0] = np.diag([1.0, 1.0, -1.0])

    monkeypatch.setattr(mpm, "substep", inverting_substep)
    with pytest.raises(SimulationAbort) as info:
        simulate(StaticScene(block), SMALL, 2)
    assert (info.value.frame, info.value.substep) == (0, SMALL.substeps_per_frame - 1)
    assert "(frame 0, substep 9)" in str(info.value)


def test_inverted_initial_state_is_tagged():
    def inverted():
        particles = block(per_axis=1)
        particles.f_e[0] = np.diag([1.0, 1.0, -1.0])
        return particles

    with pytest.raises(SimulationAbort) as info:
        simulate(StaticScene(inverted), SMALL, 1)
    assert info.value.frame == 0 and info.value.substep is None
    assert str(info.value).endswith("(frame 0)")


@pytest.mark.slow
def test_rest_cube_settles_on_sticky_floor():
    config = SimConfig(grid_dims=(16, 16, 16), dx=1.0 / 16, dt=1e-4, substeps_per_frame=100)
    lo, _ = config.interior_bounds
    spacing = config.dx / 2
    axis = (np.arange(6) - 2.5) * spacing + 0.5
    height = lo[2] + config.dx / 4 + np.arange(6) * spacing
    x = np.stack(np.meshgrid(axis, axis, height, indexing="ij"), axis=-1).reshape(-1, 3)
    n = x.shape[0]
    elastic = ElasticParams(1e5, 0.3)
    # relaxation time near the period of the cube's lowest vertical mode
    material = Material(elastic, ViscoParams.from_elastic(elastic, nu_d=300.0))
    field = MaterialField.from_materials([material], np.zeros(n, dtype=np.int64))
    scene = StaticScene(lambda: ParticleState.create(x, np.full(n, 100.0 * spacing ** 3),
                                                     np.full(n, spacing ** 3), field))

    trajectory = simulate(scene, config, 60)
    speeds = [d.max_speed for d in trajectory.diagnostics]
    assert max(speeds[-10:]) < 1e-3
    assert max(speeds[-10:]) < max(speeds[:10])
    assert trajectory.diagnostics[-1].interior_clamps == 0
