import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anytime4d.geometry import (CameraIntrinsics, CameraPose, DepthMap, PointMap, RayMap, Sim3,
                                canonical_quat, full_res_rays, intrinsics_to_rays, matrix_to_quat,
                                normalize_scene, pointmap_from_rays, project, quat_angle,
                                quat_from_axis_angle, quat_to_matrix, rigid_apply, sim3_apply,
                                unproject, upsample_half)

seeds = st.integers(0, 2**32 - 1)


def random_pose(rng, t_scale=2.0):
    q = rng.normal(size=4)
    return CameraPose(q / np.linalg.norm(q), rng.normal(size=3) * t_scale)


def random_sim3(rng):
    q = rng.normal(size=4)
    return Sim3(float(np.exp(rng.uniform(-1, 1))), q / np.linalg.norm(q), rng.normal(size=3))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(31, 32, 1.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(6, 6, 1.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(32, 32, np.pi)
    with pytest.raises(ValueError):
        CameraIntrinsics(32, 32, 1.0, (40.0, 3.0))
    intr = CameraIntrinsics(64, 48, np.radians(60))
    assert intr.principal_point == (32.0, 24.0)
    assert intr.focal == pytest.approx(24 / np.tan(np.radians(30)), rel=1e-15)


def test_center_ray_is_optical_axis():
    # for W = H = 10 the half-grid cell (2, 2) sits at full-res (5, 5), the image center
    intr = CameraIntrinsics(10, 10, np.radians(60))
    d = intrinsics_to_rays(intr, CameraPose.identity()).directions[2, 2]
    assert np.max(np.abs(d - [0, 0, 1])) < 1e-12


def test_yaw_rotates_axis():
    intr = CameraIntrinsics(10, 10, np.radians(60))
    pose = CameraPose(quat_from_axis_angle((0, 1, 0), np.pi / 2), np.zeros(3))
    d = intrinsics_to_rays(intr, pose).directions[2, 2]
    # hand rotation: +90 deg about y sends z to x
    np.testing.assert_allclose(d, [1, 0, 0], atol=1e-9)


def test_origins_are_camera_center(rng):
    pose = random_pose(rng)
    rays = intrinsics_to_rays(CameraIntrinsics(16, 12, 1.0), pose)
    assert rays.origins.shape == (6, 8, 3)
    assert np.all(rays.origins == pose.translation)


def test_rays_reject_odd():
    intr = CameraIntrinsics(16, 16, 1.0)
    object.__setattr__(intr, "width", 15)  # bypass validation to reach the ray builder's own check
    with pytest.raises(ValueError):
        intrinsics_to_rays(intr, CameraPose())


def test_ray_directions_have_unit_camera_z(rng):
    pose = random_pose(rng)
    rays = intrinsics_to_rays(CameraIntrinsics(16, 16, 1.2), pose)
    cam = rays.directions @ pose.R
    np.testing.assert_allclose(cam[..., 2], 1.0, atol=1e-12)


def test_half_grid_matches_full_res_samples(rng):
    intr = CameraIntrinsics(16, 12, 0.9)
    pose = random_pose(rng)
    half = intrinsics_to_rays(intr, pose)
    # the half-grid center (k) sits at full-res coordinate 2k + 1, i.e. the corner shared
    # by four full-res pixels; average of the four pixel rays equals it for an affine field
    full = full_res_rays(intr, pose).directions
    avg = 0.25 * (full[0::2, 0::2] + full[1::2, 0::2] + full[0::2, 1::2] + full[1::2, 1::2])
    assert np.max(np.abs(avg - half.directions)) < 1e-12


def test_unproject_unit_depth_center():
    intr = CameraIntrinsics(8, 8, 1.0, (3.5, 3.5))
    pm = unproject(DepthMap(np.ones((8, 8)), np.ones((8, 8), bool)), intr, CameraPose())
    np.testing.assert_allclose(pm.points[3, 3], [0, 0, 1], atol=1e-15)


def test_unproject_translation_shift(rng):
    intr = CameraIntrinsics(8, 8, 1.0)
    d = DepthMap(rng.uniform(1, 3, (8, 8)), np.ones((8, 8), bool))
    a = unproject(d, intr, CameraPose())
    b = unproject(d, intr, CameraPose(translation=np.array([0, 0, -5.0])))
    np.testing.assert_allclose(b.points - a.points, np.broadcast_to([0, 0, -5.0], a.points.shape), atol=1e-12)


def test_unproject_dimension_mismatch():
    with pytest.raises(ValueError):
        unproject(DepthMap(np.ones((8, 10)), np.ones((8, 10), bool)), CameraIntrinsics(8, 8, 1.0), CameraPose())


@given(seeds)
def test_project_unproject_roundtrip(seed):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(16, 12, rng.uniform(0.5, 2.0))
    pose = random_pose(rng)
    depth = DepthMap(rng.uniform(0.5, 10, (12, 16)), rng.random((12, 16)) > 0.2)
    pm = unproject(depth, intr, pose)
    u, v, z = project(pm.points, intr, pose)
    vv, uu = np.mgrid[0:12, 0:16] + 0.5
    m = depth.valid
    np.testing.assert_allclose(z[m], depth.values[m], rtol=1e-9)
    np.testing.assert_allclose(u[m], uu[m], atol=1e-8)
    np.testing.assert_allclose(v[m], vv[m], atol=1e-8)
    # and back: unprojecting the projected depth reproduces the points
    again = unproject(DepthMap(np.where(m, z, 0), m), intr, pose)
    assert np.max(np.abs(again.points[m] - pm.points[m])) < 1e-6
    assert np.array_equal(pm.valid, depth.valid)
    assert np.all(pm.points[~m] == 0)


@given(seeds)
def test_unproject_rigid_equivariance(seed):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(8, 8, 1.1)
    pose, T = random_pose(rng), random_pose(rng)
    depth = DepthMap(rng.uniform(0.5, 5, (8, 8)), np.ones((8, 8), bool))
    lhs = unproject(depth, intr, T.compose(pose))
    rhs = rigid_apply(T, unproject(depth, intr, pose))
    assert np.max(np.abs(lhs.points - rhs.points)) < 1e-9


@given(seeds)
def test_pointmap_from_rays_matches_unproject(seed):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(16, 8, rng.uniform(0.5, 2.0))
    pose = random_pose(rng)
    depth = DepthMap(rng.uniform(0.5, 5, (8, 16)), rng.random((8, 16)) > 0.3)
    a = pointmap_from_rays(depth, intrinsics_to_rays(intr, pose))
    b = unproject(depth, intr, pose)
    assert np.max(np.abs(a.points - b.points)) < 1e-6
    assert np.array_equal(a.valid, depth.valid)


def test_constant_rays_upsample_exactly(rng):
    o = np.broadcast_to(rng.normal(size=3), (4, 5, 3)).copy()
    d = np.broadcast_to(rng.normal(size=3), (4, 5, 3)).copy()
    depth = DepthMap(rng.uniform(1, 2, (8, 10)), np.ones((8, 10), bool))
    pm = pointmap_from_rays(depth, RayMap(o, d))
    expected = o[0, 0] + depth.values[..., None] * d[0, 0]
    assert np.max(np.abs(pm.points - expected)) < 1e-12


def test_upsample_reproduces_affine(rng):
    A, b = rng.normal(size=(2, 3)), rng.normal(size=3)
    k = np.stack(np.meshgrid(np.arange(5), np.arange(4), indexing="xy"), -1)[..., ::-1] * 2 + 1.0
    grid = k @ A + b
    full = upsample_half(grid)
    pix = np.stack(np.meshgrid(np.arange(10), np.arange(8), indexing="xy"), -1)[..., ::-1] + 0.5
    assert np.max(np.abs(full - (pix @ A + b))) < 1e-12


def test_pointmap_from_rays_shape_errors():
    with pytest.raises(ValueError):
        pointmap_from_rays(DepthMap(np.ones((8, 8)), np.ones((8, 8), bool)),
                           RayMap(np.zeros((3, 4, 3)), np.ones((3, 4, 3))))


def test_invalid_depth_stays_invalid(rng):
    valid = rng.random((8, 8)) > 0.5
    pm = pointmap_from_rays(DepthMap(np.where(valid, 1.0, 0.0), valid),
                            intrinsics_to_rays(CameraIntrinsics(8, 8, 1.0), CameraPose()))
    assert np.array_equal(pm.valid, valid)


def test_sim3_basic():
    pm = PointMap(np.ones((2, 2, 3)), np.ones((2, 2), bool))
    assert np.array_equal(sim3_apply(Sim3(), pm).points, pm.points)
    np.testing.assert_array_equal(sim3_apply(Sim3(2.0), pm).points, 2 * pm.points)
    with pytest.raises(ValueError):
        Sim3(0.0)
    with pytest.raises(ValueError):
        Sim3(1.0, np.array([1.0, 1, 0, 0]))


@given(seeds)
def test_sim3_group_laws(seed):
    rng = np.random.default_rng(seed)
    A, B, C = random_sim3(rng), random_sim3(rng), random_sim3(rng)
    p = rng.normal(size=(20, 3))
    np.testing.assert_allclose(A.apply(A.inverse().apply(p)), p, atol=1e-9)
    np.testing.assert_allclose(A.compose(A.inverse()).apply(p), p, atol=1e-9)
    np.testing.assert_allclose(A.compose(B).compose(C).apply(p), A.compose(B.compose(C)).apply(p), atol=1e-9)
    np.testing.assert_allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-9)
    np.testing.assert_allclose(A.compose(B).matrix(), A.matrix() @ B.matrix(), atol=1e-9)


@given(seeds)
def test_quaternion_helpers(seed):
    rng = np.random.default_rng(seed)
    q = canonical_quat(rng.normal(size=4))
    assert q[0] >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12
    assert np.array_equal(canonical_quat(q), q)
    np.testing.assert_allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-12)
    assert quat_angle(q, -q) == pytest.approx(0.0, abs=1e-12)
    pose = CameraPose(q, rng.normal(size=3))
    assert np.array_equal(CameraPose.from_array(pose.to_array()).rotation, pose.rotation)


def test_normalize_scene_examples(rng):
    dirs = rng.normal(size=(4, 4, 3))
    unit = PointMap(dirs / np.linalg.norm(dirs, axis=-1, keepdims=True), np.ones((4, 4), bool))
    pms, _, _, s = normalize_scene([unit], [CameraPose()])
    assert s == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(pms[0].points, unit.points, atol=1e-12)
    far = PointMap(unit.points * 4, unit.valid)
    pms, poses, ds, s = normalize_scene([far], [CameraPose(translation=np.array([0, 0, 8.0]))], [np.ones(3)])
    assert s == pytest.approx(0.25, rel=1e-12)
    np.testing.assert_allclose(poses[0].translation, [0, 0, 2.0])
    np.testing.assert_allclose(ds[0], 0.25)
    with pytest.raises(ValueError):
        normalize_scene([PointMap(np.zeros((2, 2, 3)), np.zeros((2, 2), bool))], [])


@given(seeds)
def test_normalize_scene_mean_norm_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    pms = [PointMap(rng.normal(size=(6, 6, 3)) * rng.uniform(0.1, 50), rng.random((6, 6)) > 0.3) for _ in range(3)]
    pms[0].valid[0, 0] = True
    out, _, _, s = normalize_scene(pms, [CameraPose()] * 3)
    norms = np.concatenate([np.linalg.norm(p.points[p.valid], axis=-1) for p in out])
    assert abs(norms.mean() - 1) < 1e-6
    _, _, _, s2 = normalize_scene(out, [CameraPose()] * 3)
    assert abs(s2 - 1) < 1e-6
