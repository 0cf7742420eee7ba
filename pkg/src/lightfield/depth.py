"""Sparse depth from field derivatives, EPI slicing, and backprojection.

For a Lambertian scene the field is constant along the EPI line of a surface
point, so the point's distance along a ray follows from the field's first
derivatives in a local two-plane chart ``(s, t)`` with line gap ``D``::

    depth = D * dt_c / (ds_c + dt_c)

measured from the chart's ``a`` line.  The derivatives come from the tape's
input gradients chained through the analytic Jacobian of the ray-from-(s,t)
construction -- no finite differences and no ray casting.

Estimates are only meaningful where the field actually varies: pixels whose
gradient signal is too small, or whose depth estimates scatter over a small
(s, t) neighborhood, are marked invalid rather than guessed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .images import read_f32_grid, write_f32_grid
from .model import LfnModel, decode_radiance
from .nn import mlp_forward
from .rays import TwoPlaneBasis, rays_from_camera, two_plane_basis

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class DepthConfig:
    """Validity heuristic knobs.

    ``neighborhood_samples`` extra rays are drawn in an (s, t) disc of radius
    ``neighborhood_radius_frac * gap`` around the query; depth estimates must
    agree to variance below ``(tau_var_frac * gap)**2`` and every sample must
    clear the ``tau_grad`` signal floor.
    """

    neighborhood_samples: int = 5
    neighborhood_radius_frac: float = 1e-2
    tau_grad: float = 1e-4
    tau_var_frac: float = 0.02

    def tau_var(self, gap: float) -> float:
        return (self.tau_var_frac * gap) ** 2

    def offsets(self, gap: float):
        """Deterministic jitter: the query itself plus a golden-angle spiral."""
        k = np.arange(1, self.neighborhood_samples + 1, dtype=np.float64)
        radius = self.neighborhood_radius_frac * gap * np.sqrt(k / self.neighborhood_samples)
        theta = GOLDEN_ANGLE * k
        ds = np.concatenate([[0.0], radius * np.cos(theta)])
        dt = np.concatenate([[0.0], radius * np.sin(theta)])
        return ds, dt


@dataclass
class DepthEstimate:
    depth: float
    point: np.ndarray
    dispersion: float
    valid: bool


@dataclass
class SparseDepthMap:
    """Per-pixel distances along each pixel ray from the ray's canonical
    chart point ``a(s)`` (the point closest to the world origin); invalid
    pixels carry NaN."""

    width: int
    height: int
    depth: np.ndarray  # (height, width) float32, NaN where invalid
    valid: np.ndarray  # (height, width) bool
    variance: np.ndarray  # (height, width) float32, NaN where no estimate

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


# -- vectorized two-plane charts ------------------------------------------------


def _canonical_sweep_dirs(dirs):
    """Vectorized canonical sweep direction for (N, 3) unit directions."""
    axis = np.argmin(np.abs(dirs), axis=-1)
    e = np.zeros_like(dirs)
    e[np.arange(len(dirs)), axis] = 1.0
    w = e - dirs * np.take_along_axis(dirs, axis[:, None], axis=-1)
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def _st_rays_and_jacobians(a0, b0, w, s, t):
    """Rays plus d(ray)/ds, d(ray)/dt for per-pixel charts.

    ``a0, b0, w``: (P, 3) chart arrays; ``s, t``: (P, K) coordinates.
    Returns three (P, K, 6) arrays.
    """
    a = a0[:, None, :] + s[..., None] * w[:, None, :]
    b = b0[:, None, :] + t[..., None] * w[:, None, :]
    u = b - a
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    direction = u / n
    moment = np.cross(a, b) / n
    wb = np.broadcast_to(w[:, None, :], a.shape)
    dw = np.sum(direction * wb, axis=-1, keepdims=True)

    ddir_ds = (-wb + direction * dw) / n
    dmom_ds = (np.cross(wb, b) + moment * dw) / n
    ddir_dt = (wb - direction * dw) / n
    dmom_dt = (np.cross(a, wb) - moment * dw) / n

    rays = np.concatenate([direction, moment], axis=-1)
    j_s = np.concatenate([ddir_ds, dmom_ds], axis=-1)
    j_t = np.concatenate([ddir_dt, dmom_dt], axis=-1)
    return rays, j_s, j_t


def _field_st_gradients(model: LfnModel, rays, j_s, j_t):
    """Colors and per-channel (ds, dt) derivatives for (..., 6) ray batches.

    One tape forward, one backward per color channel; gradients are chained
    through the supplied ray Jacobians.
    """
    shape = rays.shape[:-1]
    flat = rays.reshape(-1, 6).astype(np.float64)
    tape = Tape()
    out, inputs = model.query_radiance_tape(flat, tape)
    colors = out.value.reshape(shape + (3,))
    ds = np.empty(shape + (3,))
    dt = np.empty(shape + (3,))
    js = j_s.reshape(-1, 6)
    jt = j_t.reshape(-1, 6)
    for ch in range(3):
        seed = np.zeros_like(out.value)
        seed[:, ch] = 1.0
        tape.backward(out, seed)
        g = inputs.grad  # (N, 6) = d(channel)/d(ray)
        ds[..., ch] = np.sum(js * g, axis=-1).reshape(shape)
        dt[..., ch] = np.sum(jt * g, axis=-1).reshape(shape)
    return colors, ds, dt


def epi_gradients(model: LfnModel, basis: TwoPlaneBasis, s, t):
    """Colors and analytic EPI derivatives ``(c, ds_c, dt_c)`` at chart
    coordinates; ``s`` and ``t`` are scalars or equal-length 1-D arrays."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    rays, j_s, j_t = _st_rays_and_jacobians(
        basis.a_origin[None], basis.b_origin[None], basis.sweep_dir[None],
        s[None, :], t[None, :],
    )
    colors, ds, dt = _field_st_gradients(model, rays, j_s, j_t)
    return colors[0], ds[0], dt[0]


def combine_channel_depths(ds, dt, gap: float, tau_grad: float = 1e-4):
    """Fold per-channel derivative pairs into one depth per query.

    Channel estimates ``gap * dt_c / (ds_c + dt_c)`` are averaged with
    gradient-magnitude weights; channels whose denominator sits below the
    signal floor are dropped.  Returns ``(depth, signal_ok)`` where queries
    with no usable channel (or overall signal below the floor) get NaN depth
    and ``signal_ok`` False.
    """
    ds = np.asarray(ds, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    denom = ds + dt
    weights = np.hypot(ds, dt)
    usable = np.abs(denom) >= tau_grad
    weights = np.where(usable, weights, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_channel = gap * dt / denom
    per_channel = np.where(usable, per_channel, 0.0)
    wsum = weights.sum(axis=-1)
    signal_ok = (np.linalg.norm(denom, axis=-1) >= tau_grad) & (wsum > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.sum(weights * per_channel, axis=-1) / wsum
    return np.where(signal_ok, depth, np.nan), signal_ok


def depth_along_ray(model: LfnModel, basis: TwoPlaneBasis, s: float, t: float,
                    cfg: DepthConfig = DepthConfig()) -> DepthEstimate:
    """Depth of the ray ``(s, t)`` in a chart, from ``a(s)``, with validity.

    The depth is the estimate at the query itself; the jittered neighborhood
    only feeds the dispersion (variance) used for the validity test.  A
    too-small derivative signal yields an invalid result, not an exception.
    """
    gap = basis.plane_gap
    off_s, off_t = cfg.offsets(gap)
    ss = (s + off_s)[None, :]
    tt = (t + off_t)[None, :]
    rays, j_s, j_t = _st_rays_and_jacobians(
        basis.a_origin[None], basis.b_origin[None], basis.sweep_dir[None], ss, tt
    )
    _, ds, dt = _field_st_gradients(model, rays, j_s, j_t)
    depths, ok = combine_channel_depths(ds[0], dt[0], gap, cfg.tau_grad)

    a = basis.a(s)
    direction = (basis.b(t) - a) / np.linalg.norm(basis.b(t) - a)
    if not np.all(ok):
        return DepthEstimate(np.nan, np.full(3, np.nan), np.nan, False)
    dispersion = float(np.var(depths))
    depth = float(depths[0])
    point = a + depth * direction
    return DepthEstimate(depth, point, dispersion, dispersion < cfg.tau_var(gap))


def sparse_depth_map(model: LfnModel, cam, cfg: DepthConfig = DepthConfig(),
                     gap: float = 1.0) -> SparseDepthMap:
    """Per-pixel analytic depth in each pixel ray's canonical chart.

    A pixel is valid when every neighborhood sample clears the signal floor
    and the depth estimates agree (variance below threshold).  Deterministic:
    repeated calls produce identical masks.
    """
    rays = rays_from_camera(cam).reshape(-1, 6)
    dirs = rays[:, :3]
    a0 = np.cross(dirs, rays[:, 3:])
    b0 = a0 + gap * dirs
    w = _canonical_sweep_dirs(dirs)
    off_s, off_t = cfg.offsets(gap)
    n_pix = len(rays)
    k = len(off_s)

    depth = np.full(n_pix, np.nan, dtype=np.float64)
    variance = np.full(n_pix, np.nan, dtype=np.float64)
    valid = np.zeros(n_pix, dtype=bool)

    block = 4 * cam.width  # pixels per tape pass, keeps batches ~24k rays max
    for p0 in range(0, n_pix, block):
        p1 = min(p0 + block, n_pix)
        ss = np.broadcast_to(off_s, (p1 - p0, k))
        tt = np.broadcast_to(off_t, (p1 - p0, k))
        chart_rays, j_s, j_t = _st_rays_and_jacobians(a0[p0:p1], b0[p0:p1], w[p0:p1], ss, tt)
        _, ds, dt = _field_st_gradients(model, chart_rays, j_s, j_t)
        depths, ok = combine_channel_depths(ds, dt, gap, cfg.tau_grad)  # (P, K)
        all_ok = np.all(ok, axis=-1)
        disp = np.var(depths, axis=-1)
        good = all_ok & (disp < cfg.tau_var(gap))
        center = depths[:, 0]
        depth[p0:p1] = np.where(good, center, np.nan)
        variance[p0:p1] = np.where(all_ok, disp, np.nan)
        valid[p0:p1] = good

    shape = (cam.height, cam.width)
    return SparseDepthMap(
        width=cam.width,
        height=cam.height,
        depth=depth.reshape(shape).astype(np.float32),
        valid=valid.reshape(shape),
        variance=variance.reshape(shape).astype(np.float32),
    )


def camera_depth_offsets(cam):
    """Per-pixel shift from camera-center ray distance to chart ``a(s)``
    distance: add this to a camera-referenced depth grid to compare it with a
    :class:`SparseDepthMap`."""
    rays = rays_from_camera(cam)
    dirs = rays[..., :3]
    a0 = np.cross(dirs, rays[..., 3:])
    c = cam.center()
    return np.sum((c - a0) * dirs, axis=-1)


def align_camera_depth(cam, camera_depth_grid):
    """Convert an oracle camera-distance grid to chart-referenced depths."""
    return np.asarray(camera_depth_grid, dtype=np.float64) + camera_depth_offsets(cam)


def backproject_pointcloud(depth_maps, images=None):
    """Lift valid pixels of ``(SparseDepthMap, Camera)`` pairs to world points.

    Returns ``(points, colors)``; colors come from the aligned images when
    given, otherwise mid-gray.
    """
    points = []
    colors = []
    for i, (dmap, cam) in enumerate(depth_maps):
        rays = rays_from_camera(cam).reshape(-1, 6)
        dirs = rays[:, :3]
        a0 = np.cross(dirs, rays[:, 3:])
        mask = dmap.valid.reshape(-1)
        if not np.any(mask):
            continue
        d = dmap.depth.reshape(-1)[mask, None].astype(np.float64)
        points.append(a0[mask] + d * dirs[mask])
        if images is not None:
            colors.append(np.asarray(images[i]).reshape(-1, 3)[mask])
        else:
            colors.append(np.full((int(mask.sum()), 3), 0.5))
    if not points:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(points), np.concatenate(colors)


def save_pointcloud(path, points, colors):
    """Plain-text XYZRGB lines."""
    with open(path, "w") as f:
        for p, c in zip(np.asarray(points), np.asarray(colors)):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}\n")


def save_depth_map(path, dmap: SparseDepthMap):
    write_f32_grid(path, dmap.depth)


def load_depth_map(path) -> SparseDepthMap:
    grid = read_f32_grid(path)
    valid = np.isfinite(grid)
    return SparseDepthMap(
        width=grid.shape[1],
        height=grid.shape[0],
        depth=grid,
        valid=valid,
        variance=np.full_like(grid, np.nan),
    )


# -- EPI ------------------------------------------------------------------------


@dataclass
class EpiImage:
    """2-D slice of the field over a two-plane chart; ``rgb[i, j]`` is the
    color of the ray from ``a(s_values[i])`` to ``b(t_values[j])``."""

    s_values: np.ndarray
    t_values: np.ndarray
    rgb: np.ndarray  # (len(s), len(t), 3) in [0, 1]
    basis: TwoPlaneBasis


def _epi_rays(basis: TwoPlaneBasis, s_values, t_values):
    s_values = np.asarray(s_values, dtype=np.float64)
    t_values = np.asarray(t_values, dtype=np.float64)
    for name, grid in (("s", s_values), ("t", t_values)):
        if grid.size == 0:
            raise ValueError(f"{name} grid is empty")
        if grid.size > 1 and not np.all(np.diff(grid) > 0):
            raise ValueError(f"{name} grid must be strictly increasing")
    a = basis.a(s_values)[:, None, :]
    b = basis.b(t_values)[None, :, :]
    u = b - a
    n = np.linalg.norm(u, axis=-1)
    bad = np.argwhere(n <= 1e-12)
    if len(bad):
        i, j = bad[0]
        raise ValueError(
            f"degenerate ray at grid indices (s={i}, t={j}): a(s) coincides with b(t)"
        )
    rays = np.concatenate([u / n[..., None], np.cross(a, b) / n[..., None]], axis=-1)
    return rays, s_values, t_values


def sample_epi(model: LfnModel, basis: TwoPlaneBasis, s_values, t_values,
               chunk: int = 8192) -> EpiImage:
    """Sample the field over an (s, t) grid in the chart."""
    rays, s_values, t_values = _epi_rays(basis, s_values, t_values)
    flat = rays.reshape(-1, 6)
    parts = [
        decode_radiance(model.query_radiance(flat[i : i + chunk]))
        for i in range(0, len(flat), chunk)
    ]
    rgb = np.concatenate(parts).reshape(len(s_values), len(t_values), 3)
    return EpiImage(s_values, t_values, rgb.astype(np.float32), basis)


def sample_epi_oracle(scene, basis: TwoPlaneBasis, s_values, t_values) -> EpiImage:
    """Ground-truth EPI of a procedural scene over the same chart (oriented
    full-line semantics, matching what cameras outside the scene observe)."""
    from .scenes import trace_line_batch

    rays, s_values, t_values = _epi_rays(basis, s_values, t_values)
    rgb, _, _ = trace_line_batch(scene, rays)
    return EpiImage(s_values, t_values, rgb.astype(np.float32), basis)
