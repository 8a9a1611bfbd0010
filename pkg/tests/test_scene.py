import numpy as np
import pytest
from hypothesis import given, strategies as st

from nperf.geometry import project, unproject_pixels
from nperf.metrics import psnr
from nperf.renderer import render_view
from nperf.scene import (
    Camera,
    DepthMap,
    Mask2D,
    Mask3D,
    NeuralPointCloud,
    ObjectSpec,
    Ray,
    SceneSpec,
    TrajectorySpec,
    camera_ray,
    generate_scene,
)

from conftest import cached_scene


# ---------------------------------------------------------------- types


def test_cloud_validation():
    with pytest.raises(ValueError):
        NeuralPointCloud(np.zeros((2, 3)), [0.5], np.zeros((2, 4)))
    with pytest.raises(ValueError):
        NeuralPointCloud(np.zeros((1, 3)), [1.5], np.zeros((1, 4)))
    with pytest.raises(ValueError):
        NeuralPointCloud(np.zeros((1, 3)), [0.5], [[np.inf, 0, 0, 0]])
    c = NeuralPointCloud.empty(5)
    assert len(c) == 0 and c.feature_dim == 5


def test_cloud_is_immutable_and_revision_tracks_content():
    c = NeuralPointCloud.from_positions(np.ones((3, 3)), 2)
    with pytest.raises(ValueError):
        c.features[0, 0] = 1.0
    r = c.revision()
    c2 = c.replace(features=np.ones((3, 2)))
    assert c2.revision() != r and c2.geometry_revision() == c.geometry_revision()


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera.from_intrinsics(10, 10, 5, 5, 10, 10, R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        Camera.from_intrinsics(-1, 10, 5, 5, 10, 10)
    with pytest.raises(ValueError):
        Camera.from_intrinsics(10, 10, 12, 5, 10, 10)


def test_identity_camera_principal_ray():
    cam = Camera.from_intrinsics(100, 100, 50.5, 50.5, 101, 101)
    r = camera_ray(cam, 50, 50)
    assert np.allclose(r.direction, [0, 0, 1], atol=1e-15)
    assert np.allclose(r.origin, 0)


def test_translated_camera_origin_is_minus_t():
    cam = Camera.from_intrinsics(100, 100, 50.5, 50.5, 101, 101, t=[0, 0, -5])
    r = camera_ray(cam, 50, 50)
    assert np.allclose(r.origin, [0, 0, 5])
    p = r.at(3.0)
    u, v, z = project(cam, p)
    assert (u, v) == pytest.approx((50.0, 50.0)) and z == pytest.approx(3.0)


def test_pinhole_arithmetic():
    # pixel center (150.5, 50.5) with c = (50.5, 50.5): direction proportional to (1, 0, 1)
    cam = Camera.from_intrinsics(100, 100, 50.5, 50.5, 200, 101)
    d = camera_ray(cam, 150, 50).direction
    assert np.allclose(d, np.array([1, 0, 1]) / np.sqrt(2))


def test_camera_ray_rejects_outside_pixel():
    cam = Camera.from_intrinsics(10, 10, 5, 5, 10, 10)
    with pytest.raises(ValueError):
        camera_ray(cam, 10, 0)


@given(
    u=st.integers(0, 31), v=st.integers(0, 31), depth=st.floats(0.5, 20),
    yaw=st.floats(-40, 40), h=st.floats(-1, 1),
)
def test_ray_project_unproject_round_trip(u, v, depth, yaw, h):
    a = np.deg2rad(yaw)
    cam = Camera.look_at([4 * np.sin(a), h, -4 * np.cos(a)], [0, 0, 0], [0, 1, 0], 30, 30, 32, 32)
    r = camera_ray(cam, u, v)
    p = unproject_pixels(cam, u, v, depth)
    # the unprojected point lies on the pixel ray
    s = (p - r.origin) @ r.direction
    assert np.allclose(r.at(s), p, atol=1e-9)
    pu, pv, pz = project(cam, p)
    assert (pu, pv, pz) == pytest.approx((u, v, depth), abs=1e-9)


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [0, 0, 2], 0, 1)
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [0, 0, 1], 2, 1)


def test_masks_and_depth_types():
    m = Mask2D.from_pixels(4, 3, [(0, 0), (3, 2), (0, 0)], prompts=[(1, 1)])
    assert len(m) == 2 and m.pixels() == [(0, 0), (3, 2)]
    with pytest.raises(ValueError):
        Mask2D.from_pixels(4, 3, [(4, 0)])
    with pytest.raises(ValueError):
        Mask2D(np.zeros((3, 4)), prompts=[(9, 9)])
    m3 = Mask3D([5, 1, 3])
    assert m3.indices.tolist() == [1, 3, 5]
    assert m3.complement(7).indices.tolist() == [0, 2, 4, 6]
    with pytest.raises(ValueError):
        Mask3D([1, 1])
    with pytest.raises(ValueError):
        m3.validate(5)
    with pytest.raises(ValueError):
        DepthMap(np.array([[1.0, -2.0]]))
    d = DepthMap(np.array([[1.0, np.inf]]))
    assert d.valid.tolist() == [[True, False]]


# ---------------------------------------------------------------- generator


def test_spec_validation():
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(trajectory=TrajectorySpec(radius=0.0)))
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(object=ObjectSpec(size=0.0)))
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(trajectory=TrajectorySpec(count=1)))


def test_generation_is_bit_reproducible(scene):
    again = generate_scene(SceneSpec(seed=0, object=ObjectSpec(kind="sphere", size=0.85)))
    assert again.cloud.revision() == scene.cloud.revision()
    for a, b in zip(again.images, scene.images):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(again.depths, scene.depths):
        assert a.values.tobytes() == b.values.tobytes()


def test_seed_changes_texture():
    a, b = cached_scene(0), cached_scene(3)
    assert not np.array_equal(a.images[0], b.images[0])


def test_object_and_background_partition_the_cloud(scene):
    n = len(scene.cloud)
    obj = scene.object_indices
    bg = Mask3D(obj).complement(n).indices
    assert len(obj) > 0 and len(np.intersect1d(obj, bg)) == 0
    assert np.array_equal(scene.background_cloud.positions, scene.cloud.positions[bg])
    assert len(scene.background_cloud) + len(obj) == n


def _brute_sphere_mask(spec, cam):
    """Per-pixel loop: nearer root of |o + t d - c|^2 = r^2 vs the wall plane."""
    c = np.asarray(spec.object.center, dtype=float)
    r = spec.object.size
    Kinv = np.linalg.inv(cam.K)
    o = -cam.R.T @ cam.t
    out = np.zeros((cam.height, cam.width), dtype=bool)
    for v in range(cam.height):
        for u in range(cam.width):
            d = cam.R.T @ (Kinv @ np.array([u + 0.5, v + 0.5, 1.0]))
            d /= np.linalg.norm(d)
            b = 2 * d @ (o - c)
            cc = (o - c) @ (o - c) - r * r
            disc = b * b - 4 * cc
            if disc < 0:
                continue
            t = (-b - np.sqrt(disc)) / 2
            t_wall = (spec.background.wall_z - o[2]) / d[2]
            out[v, u] = 0 < t < t_wall
    return out


def test_sphere_mask_matches_brute_force_intersection(scene):
    for cam, m in zip(scene.cameras, scene.masks):
        ref = _brute_sphere_mask(scene.spec, cam)
        assert m.raster.sum() == ref.sum()
        assert np.array_equal(m.raster, ref)


def test_masked_pixels_see_the_object_first(scene):
    # the analytic depth under each masked pixel lands on the sphere surface
    c, r = np.zeros(3), scene.spec.object.size
    for cam, d, m in zip(scene.cameras, scene.depths, scene.masks):
        v, u = np.nonzero(m.raster)
        p = unproject_pixels(cam, u, v, d.values[v, u])
        assert np.allclose(np.linalg.norm(p - c, axis=1), r, atol=1e-9)


def test_no_object_means_empty_masks():
    b = generate_scene(SceneSpec(seed=5, object=ObjectSpec(kind="none")))
    assert all(len(m) == 0 for m in b.masks)
    assert len(b.object_indices) == 0


def test_gt_images_are_renderer_self_consistent(scene):
    for i, cam in enumerate(scene.cameras):
        out = render_view(scene.cloud, cam, scene.render_config, scene.decoder)
        assert out.color.tobytes() == scene.images[i].tobytes()
        bg = render_view(scene.complete_background, cam, scene.render_config, scene.decoder)
        assert psnr(bg.color, scene.background_images[i]) == float("inf")


def test_ground_truth_confidences_are_one(scene):
    assert np.all(scene.cloud.confidences == 1.0)
