"""Finger statics: mesh construction, energies, equilibria, datasets."""

import math

import numpy as np
import pytest

from softprop.errors import SolverFailure
from softprop.geometry import RigidPose, rotation_about_z, signed_volumes
from softprop.simulator import (
    DatasetConfig,
    Demonstration,
    ExternalForceEvent,
    HandModel,
    MaterialParams,
    TendonCommand,
    build_canonical_finger,
    collect_demonstration,
    generate_dataset,
    smoothstep,
    solve_equilibrium,
    solve_hand,
)

RING = 12


@pytest.fixture(scope="module")
def tiny():
    # 4 segments, short: cheap enough for finite-difference sweeps.
    return build_canonical_finger(segments=4, length_mm=20.0)


@pytest.fixture(scope="module")
def finger():
    return build_canonical_finger(segments=12)


@pytest.fixture(scope="module")
def small_hand():
    return HandModel.build_standard(segments=6, length_mm=40.0)


# -- construction -----------------------------------------------------------


def test_canonical_counts(finger):
    layers = 13
    assert finger.rest.n_nodes == layers * (RING + 1)
    assert finger.rest.tets.shape[0] == 12 * 3 * RING
    assert np.all(signed_volumes(finger.rest.nodes, finger.rest.tets) > 0)


def test_mesh_volume_matches_prism_formula(finger):
    # Polygonal cylinder: V = 0.5 k r^2 sin(2 pi / k) * L.
    vol = signed_volumes(finger.rest.nodes, finger.rest.tets).sum()
    exact = 0.5 * RING * 8.0**2 * math.sin(2 * math.pi / RING) * 80.0
    assert vol == pytest.approx(exact, rel=1e-12)


def test_surface_area_matches_prism_formula(finger):
    side = 2 * RING * 8.0 * math.sin(math.pi / RING) * 80.0
    caps = RING * 8.0**2 * math.sin(2 * math.pi / RING)
    assert finger.surface.face_areas().sum() == pytest.approx(side + caps, rel=1e-12)


def test_embedded_path_extents(finger):
    for p in finger.tendon_paths:
        z = p.positions(finger.rest.nodes)[:, 2]
        assert z[0] == pytest.approx(0.0, abs=1e-9)
        assert z[-1] == pytest.approx(80.0, abs=1e-9)
    for p in finger.sensor_paths:
        z = p.positions(finger.rest.nodes)[:, 2]
        assert z.min() > 0.0 and z.max() < 80.0


def test_rest_lengths_are_straight_lines(finger):
    # All embedded polylines are axial lines at rest, so rest length = span.
    assert finger.tendon_rest_lengths == pytest.approx([80.0] * 4, abs=1e-9)
    span = finger.sensor_paths[0].positions(finger.rest.nodes)[:, 2]
    expected = span[-1] - span[0]
    assert finger.sensor_rest_lengths == pytest.approx([expected] * 4, abs=1e-9)


def test_build_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_canonical_finger(segments=2)
    with pytest.raises(ValueError):
        build_canonical_finger(radius_mm=-1.0)
    with pytest.raises(ValueError):
        MaterialParams(poisson_ratio=0.5)
    with pytest.raises(ValueError):
        MaterialParams(youngs_modulus_kpa=0.0)


def test_lame_constants():
    mu, lam = MaterialParams(youngs_modulus_kpa=125.0, poisson_ratio=0.45).lame()
    assert mu == pytest.approx(125.0 / 2.9, rel=1e-12)
    assert lam == pytest.approx(125.0 * 0.45 / (1.45 * 0.1), rel=1e-12)


def test_command_validation():
    with pytest.raises(ValueError):
        TendonCommand(np.full(6, 1.2))
    with pytest.raises(ValueError):
        TendonCommand(np.zeros(5))
    c = TendonCommand.rest()
    assert c.finger(2).shape == (2,)


def test_tendon_targets_mapping(finger):
    cache = finger.solver_cache()
    t = cache.tendon_targets((1.0, 0.0))
    assert t == pytest.approx([60.0, 80.0, 100.0, 80.0], abs=1e-9)
    t = cache.tendon_targets((0.0, 0.4))
    assert t == pytest.approx([80.0, 72.0, 80.0, 88.0], abs=1e-9)
    with pytest.raises(ValueError):
        cache.tendon_targets((1.2, 0.0))


# -- energy derivatives against finite differences ---------------------------


def _random_state(cache, rng, scale=0.05):
    x = cache.rest + scale * rng.normal(size=cache.rest.shape)
    x[cache.finger.base_fixed] = cache.rest[cache.finger.base_fixed]
    assert cache.deformation_gradients(x)[2].min() > 0.5
    return x


def test_gradient_matches_finite_differences(tiny):
    cache = tiny.solver_cache()
    rng = np.random.default_rng(3)
    x = _random_state(cache, rng)
    targets = cache.tendon_targets((0.6, 0.2))
    field = cache.force_field(
        [ExternalForceEvent((4.0, 0.0, 12.0), 6.0, (-15.0, 5.0, 0.0))]
    )
    g, _ = cache.newton_system(x, targets, field, 1.1)
    free_dofs = (3 * cache.free_nodes[:, None] + np.arange(3)).ravel()
    h = 1e-6
    for d in rng.choice(cache.n_free, 25, replace=False):
        xp = x.copy()
        xp.reshape(-1)[free_dofs[d]] += h
        xm = x.copy()
        xm.reshape(-1)[free_dofs[d]] -= h
        fd = (
            cache.total_energy(xp, targets, field, 1.1)
            - cache.total_energy(xm, targets, field, 1.1)
        ) / (2 * h)
        assert abs(fd - g[d]) / max(abs(fd), 1.0) < 1e-5


def test_hessian_matches_finite_differences(tiny):
    cache = tiny.solver_cache()
    rng = np.random.default_rng(7)
    x = _random_state(cache, rng)
    targets = cache.tendon_targets((0.3, 0.8))
    field = cache.force_field(
        [ExternalForceEvent((0.0, 4.0, 15.0), 6.0, (0.0, -20.0, 5.0))]
    )
    _, hess = cache.newton_system(x, targets, field, 0.9)
    assert np.abs(hess - hess.T).max() < 1e-8
    free_dofs = (3 * cache.free_nodes[:, None] + np.arange(3)).ravel()
    h = 1e-6
    for _ in range(5):
        w = rng.normal(size=cache.n_free)
        w /= np.linalg.norm(w)
        xp = x.copy()
        xp.reshape(-1)[free_dofs] += h * w
        xm = x.copy()
        xm.reshape(-1)[free_dofs] -= h * w
        gp, _ = cache.newton_system(xp, targets, field, 0.9)
        gm, _ = cache.newton_system(xm, targets, field, 0.9)
        fd = (gp - gm) / (2 * h)
        assert np.abs(fd - hess @ w).max() / max(np.abs(fd).max(), 1.0) < 1e-6


def test_elastic_energy_zero_at_rest(tiny):
    cache = tiny.solver_cache()
    assert cache.elastic_energy(cache.rest, 1.0) == pytest.approx(0.0, abs=1e-9)
    assert cache.elastic_energy(cache.rest, 1.3) == pytest.approx(0.0, abs=1e-9)


# -- equilibria ---------------------------------------------------------------


def test_rest_command_is_exact_equilibrium(finger):
    fr = solve_equilibrium(finger, (0.0, 0.0))
    assert fr.stats.iterations == 0
    assert np.array_equal(fr.nodes, finger.rest.nodes)
    assert fr.sensor_lengths == pytest.approx(finger.sensor_rest_lengths, abs=1e-12)


def test_base_stays_clamped(finger):
    fr = solve_equilibrium(finger, (0.8, 0.3))
    base = finger.base_fixed
    assert np.array_equal(fr.nodes[base], finger.rest.nodes[base])


def test_bend_direction_and_monotonicity(finger):
    tips = []
    for u in (0.25, 0.5, 1.0):
        fr = solve_equilibrium(finger, (u, 0.0))
        tips.append(fr.nodes[finger.tip_node])
    xs = [t[0] for t in tips]
    zs = [t[2] for t in tips]
    assert xs[0] > 5.0  # channel 0 bends toward +x
    assert xs[0] < xs[1] < xs[2]  # deflection grows with command
    assert zs[0] > zs[1] > zs[2]  # tip drops as the finger curls


def test_sensor_response_signs(finger):
    fr = solve_equilibrium(finger, (0.5, 0.0))
    rest = finger.sensor_rest_lengths
    # Bend toward +x: sensors on the +x side (45 and 315 deg) shorten, the
    # -x side (135, 225 deg) lengthens.
    assert fr.sensor_lengths[0] < rest[0] and fr.sensor_lengths[3] < rest[3]
    assert fr.sensor_lengths[1] > rest[1] and fr.sensor_lengths[2] > rest[2]


def test_achieved_tendon_lengths_near_targets(finger):
    fr = solve_equilibrium(finger, (0.5, 0.0))
    cache = finger.solver_cache()
    targets = cache.tendon_targets((0.5, 0.0))
    achieved = np.array([t.length(fr.nodes) for t in cache.tendons])
    # Stiff penalty pulls within a fraction of a millimetre of the target.
    assert np.abs(achieved - targets).max() < 1.0


def test_ninety_degree_equivariance(finger):
    # The mesh, tendons, and sensors map onto themselves under a 90-degree
    # rotation, so driving channel 1 must reproduce channel 0 rotated.
    layers = 13
    perm = np.zeros(finger.rest.n_nodes, dtype=int)
    for i in range(layers):
        base = i * (RING + 1)
        perm[base] = base
        for s in range(RING):
            perm[base + 1 + s] = base + 1 + (s + 3) % RING
    r90 = rotation_about_z(np.pi / 2)
    assert np.abs(finger.rest.nodes[perm] - finger.rest.nodes @ r90.T).max() < 1e-12
    a = solve_equilibrium(finger, (0.55, 0.0)).nodes
    b = solve_equilibrium(finger, (0.0, 0.55)).nodes
    assert np.abs(b[perm] - a @ r90.T).max() < 1e-9


def test_energy_decreases_along_accepted_steps(finger):
    # Single ramp stage: one objective, so the whole sequence is monotone.
    fr = solve_equilibrium(finger, (0.45, 0.2))
    assert fr.stats.stages == 1
    en = np.array(fr.stats.energies)
    assert np.all(np.diff(en) <= 1e-9)
    # Multi-stage solves switch tendon targets between stages, so the energy
    # may jump up at most once per stage boundary, never within a stage.
    fr = solve_equilibrium(finger, (0.9, 0.2))
    up = int(np.sum(np.diff(np.array(fr.stats.energies)) > 1e-9))
    assert up <= fr.stats.stages - 1


def test_solve_is_deterministic(finger):
    a = solve_equilibrium(finger, (0.43, 0.81))
    b = solve_equilibrium(finger, (0.43, 0.81))
    assert np.array_equal(a.nodes, b.nodes)
    assert np.array_equal(a.sensor_lengths, b.sensor_lengths)


def test_warm_start_converges_fast(finger):
    base = solve_equilibrium(finger, (0.5, 0.5))
    fr = solve_equilibrium(finger, (0.52, 0.5), x0=base.nodes)
    assert fr.stats.iterations <= 10
    assert fr.stats.stages == 1


def test_push_force_deflects_and_registers(finger):
    ev = ExternalForceEvent((8.0, 0.0, 60.0), 22.0, (-40.0, 0.0, 0.0))
    fr = solve_equilibrium(finger, (0.0, 0.0), forces=(ev,))
    tip = fr.nodes[finger.tip_node]
    assert tip[0] < -0.5  # pushed toward -x
    rest = finger.sensor_rest_lengths
    # +x side is now the outside of the bend: sensors 0 and 3 lengthen.
    assert fr.sensor_lengths[0] > rest[0] and fr.sensor_lengths[3] > rest[3]
    assert fr.sensor_lengths[1] < rest[1] and fr.sensor_lengths[2] < rest[2]


def test_stiffer_material_deflects_less(finger):
    ev = ExternalForceEvent((8.0, 0.0, 60.0), 22.0, (-30.0, 0.0, 0.0))
    soft = solve_equilibrium(finger, (0.0, 0.0), forces=(ev,), e_scale=0.8)
    stiff = solve_equilibrium(finger, (0.0, 0.0), forces=(ev,), e_scale=1.4)
    assert abs(stiff.nodes[finger.tip_node][0]) < abs(soft.nodes[finger.tip_node][0])


def test_sensor_lengths_rigid_motion_invariant(finger):
    fr = solve_equilibrium(finger, (0.6, 0.1))
    pose = RigidPose(rotation_about_z(0.7), np.array([5.0, -2.0, 3.0]))
    moved = pose.apply(fr.nodes)
    for path, ln in zip(finger.sensor_paths, fr.sensor_lengths):
        assert path.length(moved) == pytest.approx(ln, abs=1e-9)


def test_solver_failure_carries_diagnostics(finger):
    with pytest.raises(SolverFailure) as exc:
        solve_equilibrium(finger, (1.0, 0.0), max_iters=2)
    assert exc.value.residual is not None and exc.value.residual > 0
    assert "iterations" in str(exc.value)


def test_force_field_sums_to_applied_force(finger):
    cache = finger.solver_cache()
    ev1 = ExternalForceEvent((8.0, 0.0, 40.0), 20.0, (-10.0, 4.0, 2.0))
    ev2 = ExternalForceEvent((0.0, -8.0, 70.0), 20.0, (0.0, 12.0, -3.0))
    field = cache.force_field([ev1, ev2])
    assert field.sum(axis=0) == pytest.approx(
        ev1.force_mn + ev2.force_mn, abs=1e-9
    )
    with pytest.raises(ValueError):
        cache.force_field(
            [ExternalForceEvent((500.0, 0.0, 40.0), 20.0, (1.0, 0.0, 0.0))]
        )


def test_force_event_validation():
    with pytest.raises(ValueError):
        ExternalForceEvent((0, 0, 0), -1.0, (1, 0, 0))
    with pytest.raises(ValueError):
        ExternalForceEvent((0, 0, 0), 5.0, (1, 0, 0), window=(3, 3))
    ev = ExternalForceEvent((0, 0, 0), 5.0, (2, 0, 0))
    assert ev.scaled(0.5).force_mn == pytest.approx([1.0, 0.0, 0.0])


# -- hand + dataset ------------------------------------------------------------


def test_solve_hand_collects_all_fingers(small_hand):
    frame, finger_frames = solve_hand(small_hand, np.array([0.4, 0, 0, 0, 0, 0.3]))
    assert frame.sensor_lengths.shape == (12,)
    assert frame.nodes.shape[0] == 3
    assert len(finger_frames) == 3
    # Unactuated finger 1 stays at rest.
    assert np.array_equal(frame.nodes[1], small_hand.fingers[1].rest.nodes)


def test_dataset_reproducible_and_prefix_stable(small_hand):
    cfg = DatasetConfig(frames=4, force_prob=0.7, force_mag_mn=(5.0, 25.0))
    a = generate_dataset(small_hand, cfg, seed=11)
    b = generate_dataset(small_hand, cfg, seed=11)
    assert len(a) == len(b)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.nodes, fb.nodes)
        assert np.array_equal(fa.sensor_lengths, fb.sensor_lengths)
        assert np.array_equal(fa.command, fb.command)
    # Frames draw from per-index streams: a shorter run is a prefix.
    c = generate_dataset(small_hand, DatasetConfig(frames=2, force_prob=0.7,
                                                   force_mag_mn=(5.0, 25.0)), seed=11)
    for fa, fc in zip(a[:2], c):
        assert np.array_equal(fa.nodes, fc.nodes)
    d = generate_dataset(small_hand, cfg, seed=12)
    assert not np.array_equal(a[0].command, d[0].command)


def test_dataset_respects_config(small_hand):
    cfg = DatasetConfig(
        frames=3,
        force_prob=0.0,
        randomize_material=False,
        max_command=0.5,
    )
    frames = generate_dataset(small_hand, cfg, seed=5)
    for fr in frames:
        assert fr.command.max() <= 0.5
        assert fr.e_scales == pytest.approx([1.0, 1.0, 1.0])
        assert all(len(f) == 0 for f in fr.forces)


def test_dataset_resolve_matches_recorded_frame(small_hand):
    cfg = DatasetConfig(frames=2, force_prob=1.0, force_mag_mn=(5.0, 20.0))
    frames = generate_dataset(small_hand, cfg, seed=3)
    fr = frames[1]
    redo, _ = solve_hand(small_hand, fr.command, fr.forces, fr.e_scales)
    assert np.array_equal(redo.nodes, fr.nodes)
    assert np.array_equal(redo.sensor_lengths, fr.sensor_lengths)


def test_dataset_config_validation():
    with pytest.raises(ValueError):
        DatasetConfig(frames=0)
    with pytest.raises(ValueError):
        DatasetConfig(force_radius_frac=(0.1, 0.4))
    with pytest.raises(ValueError):
        DatasetConfig(max_command=0.0)


# -- demonstrations -------------------------------------------------------------


def test_smoothstep_shape():
    assert smoothstep(0.0) == 0.0
    assert smoothstep(1.0) == 1.0
    assert smoothstep(0.5) == pytest.approx(0.5)
    assert smoothstep(-2.0) == 0.0 and smoothstep(3.0) == 1.0


def test_demo_without_events_stays_at_rest(small_hand):
    demo = collect_demonstration(small_hand, script=(), steps=3)
    assert len(demo) == 3
    for fr in demo.frames:
        assert np.array_equal(fr.nodes[0], small_hand.fingers[0].rest.nodes)
        assert fr.pose is not None


def test_demo_ramped_push_drifts_monotonically(small_hand):
    ev = ExternalForceEvent((8.0, 0.0, 30.0), 16.0, (-25.0, 0.0, 0.0), window=(0, 10))
    demo = collect_demonstration(small_hand, [(0, ev)], steps=14, ramp_steps=10)
    tip = small_hand.fingers[0].tip_node
    xs = np.array([fr.nodes[0][tip][0] for fr in demo.frames])
    assert np.all(np.diff(xs[:10]) < 1e-9)  # deeper every ramp step
    assert xs[13] > xs[9]  # relaxes back once the event window closes
    assert abs(xs[13]) < 1e-6  # fully released: returns to rest
    # Other fingers never move.
    assert np.array_equal(demo.frames[5].nodes[2], small_hand.fingers[2].rest.nodes)


def test_demo_with_pose_script(small_hand):
    poses = [
        RigidPose(rotation_about_z(0.1 * t), np.array([0.0, 0.0, 2.0 * t]))
        for t in range(3)
    ]
    demo = collect_demonstration(small_hand, script=(), pose_script=poses)
    assert len(demo) == 3
    assert demo.frames[2].pose.translation[2] == pytest.approx(4.0)


def test_demo_is_deterministic(small_hand):
    ev = ExternalForceEvent((0.0, 8.0, 25.0), 16.0, (0.0, -20.0, 0.0), window=(0, 6))
    a = collect_demonstration(small_hand, [(1, ev)], steps=6)
    b = collect_demonstration(small_hand, [(1, ev)], steps=6)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.nodes, fb.nodes)
    assert isinstance(a, Demonstration)


def test_demo_argument_validation(small_hand):
    with pytest.raises(ValueError):
        collect_demonstration(small_hand, script=())
    ev = ExternalForceEvent((0, 0, 10), 16.0, (1, 0, 0))
    with pytest.raises(ValueError):
        collect_demonstration(small_hand, [(7, ev)], steps=2)
    with pytest.raises(ValueError):
        collect_demonstration(
            small_hand, script=(), pose_script=[RigidPose.identity()], steps=2
        )
