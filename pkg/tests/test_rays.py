import numpy as np
import pytest

from lightfield.rays import (
    Camera,
    InvalidCameraError,
    InvalidRayError,
    TwoPlaneBasis,
    closest_point_to_origin,
    pixel_directions,
    plucker_from_point_dir,
    ray_from_st,
    ray_st_jacobian,
    ray_through_pixel,
    rays_from_camera,
    two_plane_basis,
    validate_rays,
)


def random_rays(n, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-3, 3, size=(n, 3))
    d = rng.normal(size=(n, 3))
    return plucker_from_point_dir(p, d), p, d


class TestPlucker:
    def test_ray_through_origin_has_zero_moment(self):
        r = plucker_from_point_dir((0, 0, 0), (0, 0, 1))
        np.testing.assert_allclose(r, [0, 0, 1, 0, 0, 0], atol=1e-15)

    def test_offset_point_cross_product(self):
        r = plucker_from_point_dir((1, 0, 0), (0, 0, 1))
        np.testing.assert_allclose(r, [0, 0, 1, 0, -1, 0], atol=1e-15)

    def test_direction_scale_invariance(self):
        a = plucker_from_point_dir((1, 0, 0), (0, 0, 1))
        b = plucker_from_point_dir((1, 0, 0), (0, 0, 2))
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_zero_direction_rejected(self):
        with pytest.raises(InvalidRayError):
            plucker_from_point_dir((1, 2, 3), (0, 0, 1e-13))

    def test_origin_shift_invariance(self):
        rng = np.random.default_rng(3)
        rays, p, d = random_rays(1000, seed=3)
        alpha = rng.uniform(-10, 10, size=(1000, 1))
        shifted = plucker_from_point_dir(p + alpha * d, d)
        np.testing.assert_allclose(shifted, rays, atol=1e-9)

    def test_manifold_constraint(self):
        rays, _, _ = random_rays(1000, seed=4)
        d, m = rays[:, :3], rays[:, 3:]
        assert np.abs(np.linalg.norm(d, axis=1) - 1).max() < 1e-9
        assert np.abs(np.sum(d * m, axis=1)).max() < 1e-9
        assert len(validate_rays(rays)) == 0

    def test_closest_point_is_on_ray_and_orthogonal(self):
        rays, _, _ = random_rays(100, seed=5)
        pts = closest_point_to_origin(rays)
        again = plucker_from_point_dir(pts, rays[:, :3])
        np.testing.assert_allclose(again, rays, atol=1e-9)
        assert np.abs(np.sum(pts * rays[:, :3], axis=1)).max() < 1e-9


class TestCamera:
    def make(self, R=np.eye(3), t=(0, 0, 0), f=32.0, wh=(32, 32)):
        E = np.hstack([R, np.asarray(t, dtype=float)[:, None]])
        K = np.array([[f, 0, wh[0] / 2], [0, f, wh[1] / 2], [0, 0, 1.0]])
        return Camera(E, K, wh[0], wh[1])

    def test_canonical_camera_axis_ray(self):
        cam = Camera(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(3), 4, 4)
        r = ray_through_pixel(cam, 0.0, 0.0)
        np.testing.assert_allclose(r, [0, 0, 1, 0, 0, 0], atol=1e-15)

    def test_translated_camera_center_ray(self):
        cam = Camera(np.hstack([np.eye(3), np.array([[0], [0], [-5.0]])]), np.eye(3), 4, 4)
        np.testing.assert_allclose(cam.center(), [0, 0, 5], atol=1e-12)
        r = ray_through_pixel(cam, 0.0, 0.0)
        np.testing.assert_allclose(r, [0, 0, 1, 0, 0, 0], atol=1e-12)

    def test_grid_matches_per_pixel_loop(self):
        rng = np.random.default_rng(0)
        # random rotation via QR
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        cam = self.make(R=q.T, t=rng.normal(size=3), f=10.0, wh=(8, 8))
        grid = rays_from_camera(cam)
        for v in range(8):
            for u in range(8):
                expected = ray_through_pixel(cam, u + 0.5, v + 0.5)
                np.testing.assert_allclose(grid[v, u], expected, atol=1e-12)

    def test_grid_agrees_with_point_dir_constructor(self):
        cam = self.make(t=(0.3, -0.2, 4.0), f=16.0, wh=(5, 7))
        grid = rays_from_camera(cam)
        u, v = np.meshgrid(np.arange(5) + 0.5, np.arange(7) + 0.5)
        dirs = pixel_directions(cam, u, v)
        expected = plucker_from_point_dir(np.broadcast_to(cam.center(), dirs.shape), dirs)
        np.testing.assert_allclose(grid, expected, atol=1e-12)

    def test_rejects_bad_rotation(self):
        with pytest.raises(InvalidCameraError):
            self.make(R=np.eye(3) * 1.01)
        flipped = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvalidCameraError):
            self.make(R=flipped)

    def test_rejects_bad_intrinsics(self):
        E = np.hstack([np.eye(3), np.zeros((3, 1))])
        K = np.array([[8.0, 0, 4], [1.0, 8.0, 4], [0, 0, 1]])
        with pytest.raises(InvalidCameraError):
            Camera(E, K, 8, 8)
        singular = np.array([[8.0, 0, 4], [0, 0.0, 4], [0, 0, 1]])
        with pytest.raises(InvalidCameraError):
            Camera(E, singular, 8, 8)

    def test_rejects_bad_dimensions(self):
        with pytest.raises(InvalidCameraError):
            self.make(wh=(0, 8))


class TestTwoPlaneBasis:
    def test_axis_ray_canonical_chart(self):
        r = plucker_from_point_dir((0, 0, 0), (0, 0, 1))
        basis = two_plane_basis(r, gap=1.0)
        np.testing.assert_allclose(basis.a_origin, [0, 0, 0], atol=1e-15)
        np.testing.assert_allclose(basis.b_origin, [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(basis.seed_ray(), r, atol=1e-12)

    def test_seed_roundtrip_random(self):
        rays, _, _ = random_rays(1000, seed=6)
        for r in rays:
            basis = two_plane_basis(r, gap=1.0)
            np.testing.assert_allclose(ray_from_st(basis, 0.0, 0.0), r, atol=1e-9)

    def test_sweep_orthogonal(self):
        rays, _, _ = random_rays(200, seed=7)
        for r in rays:
            basis = two_plane_basis(r, gap=0.5)
            assert abs(np.dot(basis.sweep_dir, r[:3])) < 1e-12
            assert abs(np.linalg.norm(basis.sweep_dir) - 1) < 1e-12

    def test_rejects_nonpositive_gap(self):
        r = plucker_from_point_dir((1, 2, 0), (0, 1, 1))
        with pytest.raises(ValueError):
            two_plane_basis(r, gap=0.0)

    def test_explicit_chart_matches_constructor(self):
        basis = TwoPlaneBasis(
            a_origin=(1.0, 0.0, 0.0), b_origin=(1.0, 0.0, 1.0),
            sweep_dir=(1.0, 0.0, 0.0), plane_gap=1.0,
        )
        expected = plucker_from_point_dir((1, 0, 0), (0, 0, 1))
        np.testing.assert_allclose(ray_from_st(basis, 0.0, 0.0), expected, atol=1e-15)

    def test_moment_cross_identity(self):
        rng = np.random.default_rng(8)
        rays, _, _ = random_rays(50, seed=8)
        for r in rays:
            basis = two_plane_basis(r, gap=1.0)
            s, t = rng.uniform(-0.5, 0.5, size=2)
            a, b = basis.a(s), basis.b(t)
            np.testing.assert_allclose(np.cross(a, b), np.cross(a, b - a), atol=1e-12)
            ray = ray_from_st(basis, s, t)
            np.testing.assert_allclose(
                ray, plucker_from_point_dir(a, b - a), atol=1e-12
            )

    def test_rejects_parallel_sweep(self):
        with pytest.raises(InvalidRayError):
            TwoPlaneBasis((0, 0, 0), (0, 0, 1), (0, 0, 1), 1.0)

    def test_st_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        rays, _, _ = random_rays(20, seed=9)
        h = 1e-6
        for r in rays:
            basis = two_plane_basis(r, gap=1.3)
            s, t = rng.uniform(-0.3, 0.3, size=2)
            j_s, j_t = ray_st_jacobian(basis, s, t)
            fd_s = (ray_from_st(basis, s + h, t) - ray_from_st(basis, s - h, t)) / (2 * h)
            fd_t = (ray_from_st(basis, s, t + h) - ray_from_st(basis, s, t - h)) / (2 * h)
            np.testing.assert_allclose(j_s, fd_s, atol=1e-8)
            np.testing.assert_allclose(j_t, fd_t, atol=1e-8)
