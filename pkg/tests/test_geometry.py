import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewfuse.geometry import (
    Camera,
    Ray,
    look_at,
    rays_for_pixels,
    stratified_sample,
)


def identity_camera(**overrides):
    defaults = dict(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100,
                    c2w=np.eye(4), near=0.1, far=10.0, time=0.0)
    defaults.update(overrides)
    return Camera(**defaults)


class TestCamera:
    def test_rejects_non_orthonormal_rotation(self):
        c2w = np.eye(4)
        c2w[0, 0] = 1.5
        with pytest.raises(ValueError, match="orthonormal"):
            identity_camera(c2w=c2w)

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            identity_camera(near=2.0, far=1.0)
        with pytest.raises(ValueError):
            identity_camera(near=-1.0, far=1.0)
        with pytest.raises(ValueError):
            identity_camera(fx=0.0)

    def test_project_recovers_pixel_center(self):
        cam = identity_camera()
        point = np.array([[0.3, -0.2, 2.0]])
        uv, z = cam.project(point)
        assert z[0] == pytest.approx(2.0)
        assert uv[0, 0] == pytest.approx(100.0 * 0.3 / 2.0 + 50.0)


class TestRaysForPixels:
    def test_principal_point_gives_forward_axis(self):
        cam = identity_camera(cx=50.5, cy=50.5)  # center of pixel (50, 50)
        bundle = rays_for_pixels(cam, [(50, 50)])
        np.testing.assert_allclose(bundle.directions[0], [0, 0, 1], atol=1e-12)
        np.testing.assert_allclose(bundle.origins[0], [0, 0, 0], atol=1e-12)

    def test_hand_derived_pinhole_direction(self):
        # fx=fy=100 and a pixel center 100 units right of the principal point
        # give camera-space direction (1, 0, 1) normalized. With cx=cy=50
        # shifted by the half-pixel offset, pixel (50, 150) centers at (150, 50).
        cam = identity_camera(width=200, height=200, cx=50.5, cy=50.5)
        bundle = rays_for_pixels(cam, [(50, 150)])
        expected = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
        np.testing.assert_allclose(bundle.directions[0], expected, atol=1e-12)

    def test_directions_are_unit_norm(self):
        rng = np.random.default_rng(3)
        c2w = look_at(eye=[1.0, 2.0, -3.0], target=[0.0, 0.0, 0.0])
        cam = identity_camera(c2w=c2w)
        pixels = np.stack([rng.integers(0, 100, 50), rng.integers(0, 100, 50)], axis=-1)
        bundle = rays_for_pixels(cam, pixels)
        np.testing.assert_allclose(np.linalg.norm(bundle.directions, axis=-1), 1.0, atol=1e-6)

    def test_out_of_bounds_pixel_rejected(self):
        cam = identity_camera()
        with pytest.raises(ValueError, match="out of bounds"):
            rays_for_pixels(cam, [(100, 0)])
        with pytest.raises(ValueError, match="out of bounds"):
            rays_for_pixels(cam, [(0, -1)])

    def test_projection_round_trip(self):
        # Re-projecting a point on each ray recovers the queried pixel center.
        c2w = look_at(eye=[0.5, -1.0, -2.5], target=[0.1, 0.0, 0.3], up=[0.1, 1.0, 0.0])
        cam = identity_camera(c2w=c2w, fx=120.0, fy=115.0, cx=48.0, cy=52.0)
        rng = np.random.default_rng(11)
        pixels = np.stack([rng.integers(0, 100, 64), rng.integers(0, 100, 64)], axis=-1)
        bundle = rays_for_pixels(cam, pixels)
        points = bundle.origins + 3.1 * bundle.directions
        uv, z = cam.project(points)
        assert np.all(z > 0)
        expected = np.stack([pixels[:, 1] + 0.5, pixels[:, 0] + 0.5], axis=-1)
        np.testing.assert_allclose(uv, expected, atol=1e-4)

    def test_ray_time_is_camera_time(self):
        cam = identity_camera(time=0.375)
        bundle = rays_for_pixels(cam, [(1, 2), (3, 4)])
        np.testing.assert_array_equal(bundle.times, [0.375, 0.375])


class TestRay:
    def test_rejects_non_unit_direction(self):
        with pytest.raises(ValueError, match="unit"):
            Ray(origin=[0, 0, 0], direction=[1, 1, 0])


class TestStratifiedSample:
    def test_midpoints_unit_interval(self):
        ds = stratified_sample(0.0, 1.0, 4, jitter=False)
        np.testing.assert_allclose(ds.s, [0.125, 0.375, 0.625, 0.875])

    def test_midpoints_with_last_bin_rule(self):
        ds = stratified_sample(2.0, 4.0, 2, jitter=False)
        np.testing.assert_allclose(ds.s, [2.5, 3.5])
        np.testing.assert_allclose(ds.delta, [1.0, 0.5])  # last bin: far - s[-1]

    def test_jitter_deterministic_for_seed(self):
        a = stratified_sample(0.0, 1.0, 16, jitter=True, seed=7)
        b = stratified_sample(0.0, 1.0, 16, jitter=True, seed=7)
        np.testing.assert_array_equal(a.s, b.s)
        c = stratified_sample(0.0, 1.0, 16, jitter=True, seed=8)
        assert not np.array_equal(a.s, c.s)

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            stratified_sample(0.0, 1.0, 1)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 64))
    def test_jitter_keeps_one_sample_per_bin(self, seed, n):
        near, far = 1.0, 3.0
        ds = stratified_sample(near, far, n, jitter=True, seed=seed)
        edges = np.linspace(near, far, n + 1)
        assert np.all(ds.s[:-1] < ds.s[1:])
        assert np.all(ds.s >= edges[:-1]) and np.all(ds.s <= edges[1:])
        assert near <= ds.s[0] and ds.s[-1] <= far

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 64))
    def test_interior_deltas_telescope(self, seed, n):
        ds = stratified_sample(0.5, 2.5, n, jitter=True, seed=seed)
        assert ds.delta[:-1].sum() == pytest.approx(ds.s[-1] - ds.s[0], abs=1e-12)


class TestLookAt:
    def test_is_proper_rotation(self):
        c2w = look_at(eye=[2.0, 1.0, -4.0], target=[0, 0, 0])
        r = c2w[:3, :3]
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_forward_points_at_target(self):
        c2w = look_at(eye=[0.0, 0.0, -2.0], target=[0, 0, 0])
        np.testing.assert_allclose(c2w[:3, 2], [0, 0, 1], atol=1e-12)
