"""Ray-manifold geometry: Plucker coordinates, camera rays, and local
two-plane bases.

A ray is stored as a 6-vector ``(d, m)`` with unit direction ``d`` and
moment ``m = p x d`` for any point ``p`` on the ray.  The moment is
invariant to sliding ``p`` along the ray, so the 6 numbers identify an
oriented line.  All geometry here is float64; batches of rays are numpy
arrays with a trailing axis of length 6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIRECTION_TOL = 1e-9
ORTHO_TOL = 1e-9
ROTATION_TOL = 1e-6


class InvalidRayError(ValueError):
    """Raised when a ray cannot be constructed (zero or degenerate direction)."""


class InvalidCameraError(ValueError):
    """Raised for non-orthonormal rotations or unusable intrinsics."""


def plucker_from_point_dir(p, d):
    """Plucker coordinates of the oriented ray through point ``p`` along ``d``.

    Accepts arrays with a trailing axis of 3; broadcasting applies.  The
    result is normalized so the direction has unit length (moment is divided
    by the same factor), making the encoding scale-invariant in ``d``.
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise InvalidRayError("ray direction has (near-)zero length")
    d_unit = d / norm
    m = np.cross(p, d_unit)
    return np.concatenate([d_unit, m], axis=-1)


def ray_direction(rays):
    return np.asarray(rays)[..., :3]


def ray_moment(rays):
    return np.asarray(rays)[..., 3:]


def closest_point_to_origin(rays):
    """The ray point nearest to the world origin: ``d x m`` for unit ``d``."""
    rays = np.asarray(rays)
    return np.cross(rays[..., :3], rays[..., 3:])


def validate_rays(rays, tol=1e-6):
    """Check unit direction and ``d . m = 0``; returns offending indices."""
    rays = np.asarray(rays, dtype=np.float64)
    flat = rays.reshape(-1, 6)
    d, m = flat[:, :3], flat[:, 3:]
    bad_unit = np.abs(np.linalg.norm(d, axis=1) - 1.0) > tol
    bad_ortho = np.abs(np.sum(d * m, axis=1)) > tol
    return np.nonzero(bad_unit | bad_ortho)[0]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera extrinsics ``[R|t]`` and
    upper-triangular intrinsics ``K`` in pixels."""

    extrinsics: np.ndarray  # (3, 4) float64
    intrinsics: np.ndarray  # (3, 3) float64
    width: int
    height: int

    def __post_init__(self):
        E = np.asarray(self.extrinsics, dtype=np.float64)
        K = np.asarray(self.intrinsics, dtype=np.float64)
        if E.shape != (3, 4):
            raise InvalidCameraError(f"extrinsics must be 3x4, got {E.shape}")
        if K.shape != (3, 3):
            raise InvalidCameraError(f"intrinsics must be 3x3, got {K.shape}")
        R = E[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=ROTATION_TOL):
            raise InvalidCameraError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=ROTATION_TOL):
            raise InvalidCameraError("rotation determinant is not +1")
        if np.any(np.abs(K[np.tril_indices(3, k=-1)]) > 0):
            raise InvalidCameraError("intrinsics must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] == 0:
            raise InvalidCameraError("focal entries must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCameraError("image dimensions must be positive")
        object.__setattr__(self, "extrinsics", E)
        object.__setattr__(self, "intrinsics", K)

    @property
    def rotation(self):
        return self.extrinsics[:, :3]

    @property
    def translation(self):
        return self.extrinsics[:, 3]

    def center(self):
        """Camera center in world coordinates, ``c = -R^T t``."""
        return -self.rotation.T @ self.translation


def pixel_directions(cam: Camera, u, v):
    """World-space (unnormalized) viewing directions for continuous image
    coordinates ``(u, v)``: ``R^T K^-1 (u, v, 1)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ones = np.ones_like(u)
    pix = np.stack([u, v, ones], axis=-1)
    Kinv = np.linalg.inv(cam.intrinsics)
    return pix @ Kinv.T @ cam.rotation


def ray_through_pixel(cam: Camera, u, v):
    """Ray through the camera center and continuous image coordinate (u, v).

    ``rays_from_camera`` applies the half-pixel center offset; this helper
    takes the coordinate as given.
    """
    d = pixel_directions(cam, u, v)
    c = cam.center()
    return plucker_from_point_dir(np.broadcast_to(c, d.shape), d)


def rays_from_camera(cam: Camera):
    """Per-pixel rays as an (height, width, 6) array.

    Rays pass through pixel centers, i.e. image coordinate
    ``(u + 0.5, v + 0.5)`` for pixel index ``(u, v)``.
    """
    u = np.arange(cam.width, dtype=np.float64) + 0.5
    v = np.arange(cam.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)  # (H, W)
    return ray_through_pixel(cam, uu, vv)


def _canonical_sweep_dir(direction):
    """Unit vector orthogonal to ``direction``: project the world axis least
    aligned with the ray out of the ray direction and normalize.
    Deterministic and singularity-free for unit inputs."""
    direction = np.asarray(direction, dtype=np.float64)
    axis = np.argmin(np.abs(direction))
    e = np.zeros(3)
    e[axis] = 1.0
    w = e - direction * direction[axis]
    return w / np.linalg.norm(w)


@dataclass(frozen=True)
class TwoPlaneBasis:
    """Local two-plane chart around a seed ray.

    Rays near the seed are indexed by where they cross two parallel lines:
    ``a(s) = a_origin + s * sweep_dir`` and ``b(t) = b_origin + t * sweep_dir``,
    separated by ``plane_gap`` along the seed direction.  The seed ray is
    ``(s, t) = (0, 0)``.
    """

    a_origin: np.ndarray
    b_origin: np.ndarray
    sweep_dir: np.ndarray
    plane_gap: float

    def __post_init__(self):
        object.__setattr__(self, "a_origin", np.asarray(self.a_origin, dtype=np.float64))
        object.__setattr__(self, "b_origin", np.asarray(self.b_origin, dtype=np.float64))
        object.__setattr__(self, "sweep_dir", np.asarray(self.sweep_dir, dtype=np.float64))
        seed_dir = self.b_origin - self.a_origin
        n = np.linalg.norm(seed_dir)
        if n <= 1e-12:
            raise InvalidRayError("basis origins coincide")
        if abs(float(np.dot(self.sweep_dir, seed_dir / n))) >= 1.0 - 1e-6:
            raise InvalidRayError("sweep direction is (nearly) parallel to the seed ray")

    def a(self, s):
        s = np.asarray(s, dtype=np.float64)[..., None]
        return self.a_origin + s * self.sweep_dir

    def b(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        return self.b_origin + t * self.sweep_dir

    def seed_ray(self):
        return ray_from_st(self, 0.0, 0.0)


def two_plane_basis(ray, gap: float) -> TwoPlaneBasis:
    """Canonical two-plane basis seeded at ``ray``.

    ``a_origin`` is the ray point closest to the world origin, ``b_origin``
    sits ``gap`` further along the ray, and the sweep direction is the
    canonical orthogonal axis.
    """
    if gap <= 0:
        raise ValueError("plane gap must be positive")
    ray = np.asarray(ray, dtype=np.float64)
    d = ray[:3]
    a0 = closest_point_to_origin(ray)
    return TwoPlaneBasis(
        a_origin=a0,
        b_origin=a0 + gap * d,
        sweep_dir=_canonical_sweep_dir(d),
        plane_gap=float(gap),
    )


def ray_from_st(basis: TwoPlaneBasis, s, t):
    """Ray from ``a(s)`` to ``b(t)``:
    ``((b - a) / |b - a|, (a x b) / |b - a|)``.

    ``s`` and ``t`` broadcast; the output has their broadcast shape plus a
    trailing axis of 6.
    """
    a = basis.a(s)
    b = basis.b(t)
    u = b - a
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise InvalidRayError("coincident two-plane points a(s) == b(t)")
    return np.concatenate([u / n, np.cross(a, b) / n], axis=-1)


def ray_st_jacobian(basis: TwoPlaneBasis, s, t):
    """Analytic derivatives of ``ray_from_st`` with respect to s and t.

    Returns ``(dr_ds, dr_dt)``, each shaped like the rays (trailing axis 6).
    Used to chain field input-gradients down to EPI coordinates.
    """
    a = basis.a(s)
    b = basis.b(t)
    w = basis.sweep_dir
    u = b - a
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise InvalidRayError("coincident two-plane points a(s) == b(t)")
    direction = u / n
    moment = np.cross(a, b) / n
    dw = np.sum(direction * w, axis=-1, keepdims=True)  # d . w

    # d/ds: a moves along w, b fixed.
    ddir_ds = (-w + direction * dw) / n
    dmom_ds = (np.cross(w, b) + moment * dw) / n
    # d/dt: b moves along w, a fixed.
    ddir_dt = (w - direction * dw) / n
    dmom_dt = (np.cross(a, w) - moment * dw) / n

    dr_ds = np.concatenate([ddir_ds, dmom_ds], axis=-1)
    dr_dt = np.concatenate([ddir_dt, dmom_dt], axis=-1)
    return dr_ds, dr_dt
