"""Procedural Lambertian scenes and the reference ray tracer.

Scenes are a handful of spheres and axis-aligned boxes with flat diffuse
albedo, lit by one fixed directional light plus an ambient term, in front of
a constant background.  Shading is view-independent by construction, so any
two unoccluded rays through a surface point observe the same color -- the
property the EPI depth analysis relies on and the reason this tracer can act
as ground truth for everything downstream.

Datasets rendered here land in a documented directory layout::

    scene_0000/rgb/0000.png      8-bit RGB views
    scene_0000/depth/0000.f32    little-endian float32 ray distances (NaN = miss)
    scene_0000/cameras.txt       per-view [R|t] and K, 17 significant digits
    manifest.txt                 splits, seeds, file hashes
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import load_png, read_f32_grid, save_png, write_f32_grid
from .rays import Camera, closest_point_to_origin

HIT_EPS = 1e-9

LIGHT_DIR = np.array([0.35, 0.5, 0.75]) / np.linalg.norm([0.35, 0.5, 0.75])
AMBIENT = 0.3
DIFFUSE = 0.7


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    def max_reach(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    albedo: tuple

    def max_reach(self) -> float:
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half_extents))


@dataclass(frozen=True)
class ProceduralScene:
    primitives: tuple
    background: tuple = (0.1, 0.1, 0.12)
    light_dir: tuple = tuple(LIGHT_DIR)
    ambient: float = AMBIENT
    diffuse: float = DIFFUSE
    bounding_radius: float = 1.0

    def __post_init__(self):
        for prim in self.primitives:
            if prim.max_reach() > self.bounding_radius + 1e-9:
                raise ValueError("primitive extends past the scene bounding radius")
            if np.any(np.asarray(prim.albedo) < 0) or np.any(np.asarray(prim.albedo) > 1):
                raise ValueError("albedo must lie in [0, 1]")


def generate_scene(seed: int) -> ProceduralScene:
    """Deterministic random scene: 1-4 primitives inside the unit bounding
    sphere, random flat albedos, random dark background."""
    rng = np.random.default_rng(seed)
    n_prims = int(rng.integers(1, 5))
    prims = []
    for _ in range(n_prims):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        albedo = tuple(rng.uniform(0.15, 0.95, size=3))
        if rng.random() < 0.5:
            radius = float(rng.uniform(0.2, 0.45))
            dist = float(rng.uniform(0.0, 1.0 - radius))
            prims.append(Sphere(tuple(axis * dist), radius, albedo))
        else:
            half = rng.uniform(0.15, 0.4, size=3)
            dist = float(rng.uniform(0.0, max(0.0, 1.0 - np.linalg.norm(half))))
            prims.append(Box(tuple(axis * dist), tuple(half), albedo))
    background = tuple(rng.uniform(0.02, 0.25, size=3))
    return ProceduralScene(primitives=tuple(prims), background=background)


# -- intersection ------------------------------------------------------------


def _intersect_sphere(sphere: Sphere, origins, dirs):
    oc = origins - np.asarray(sphere.center)
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - sphere.radius**2
    disc = b * b - c
    hit = disc > 0.0  # grazing rays with exactly zero discriminant count as miss
    t = np.full(b.shape, np.inf)
    root = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    t = np.where(hit & (t_near > HIT_EPS), t_near, t)
    inside = hit & (t_near <= HIT_EPS) & (t_far > HIT_EPS)
    t = np.where(inside, t_far, t)
    return t


def _sphere_normal(sphere: Sphere, points):
    return (points - np.asarray(sphere.center)) / sphere.radius


def _intersect_box(box: Box, origins, dirs):
    lo = np.asarray(box.center) - np.asarray(box.half_extents)
    hi = np.asarray(box.center) + np.asarray(box.half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    t_near = np.max(np.minimum(t1, t2), axis=-1)
    t_far = np.min(np.maximum(t1, t2), axis=-1)
    hit = (t_near < t_far) & (t_far > HIT_EPS) & (t_near > HIT_EPS)
    return np.where(hit, t_near, np.inf)


def _box_normal(box: Box, points):
    local = (points - np.asarray(box.center)) / np.asarray(box.half_extents)
    axis = np.argmax(np.abs(local), axis=-1)
    normals = np.zeros_like(points)
    idx = np.arange(len(points))
    normals[idx, axis] = np.sign(local[idx, axis])
    return normals


def trace_batch(scene: ProceduralScene, origins, dirs):
    """Nearest-hit trace of many rays.

    Returns ``(rgb, depth, hit)`` where depth is the distance from each
    origin along its (unit) direction; misses carry the background color and
    NaN depth.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    origins, dirs = np.broadcast_arrays(origins, dirs)
    n = origins.shape[0]

    best_t = np.full(n, np.inf)
    best_prim = np.full(n, -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            t = _intersect_sphere(prim, origins, dirs)
        else:
            t = _intersect_box(prim, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_prim = np.where(closer, k, best_prim)

    rgb = np.tile(np.asarray(scene.background, dtype=np.float64), (n, 1))
    hit = best_prim >= 0
    light = np.asarray(scene.light_dir, dtype=np.float64)
    for k, prim in enumerate(scene.primitives):
        mask = best_prim == k
        if not np.any(mask):
            continue
        points = origins[mask] + best_t[mask, None] * dirs[mask]
        if isinstance(prim, Sphere):
            normals = _sphere_normal(prim, points)
        else:
            normals = _box_normal(prim, points)
        lambert = np.maximum(0.0, normals @ light)
        shade = scene.ambient + scene.diffuse * lambert
        rgb[mask] = np.clip(np.asarray(prim.albedo) * shade[:, None], 0.0, 1.0)

    depth = np.where(hit, best_t, np.nan)
    return rgb, depth, hit


def trace_line_batch(scene: ProceduralScene, rays):
    """Radiance of oriented lines given as (..., 6) Plucker rays.

    A line's color is what an observer outside the scene sees looking along
    it: the first intersection along the whole line, found by starting the
    march safely outside the bounding sphere.  Depth is the signed distance
    of that hit from the line's canonical reference point (closest to the
    world origin), so points behind the reference come out negative.
    """
    flat = np.asarray(rays, dtype=np.float64).reshape(-1, 6)
    d = flat[:, :3]
    r0 = np.cross(d, flat[:, 3:])
    back = 2.0 * scene.bounding_radius + 1.0
    rgb, t, hit = trace_batch(scene, r0 - back * d, d)
    depth = np.where(hit, t - back, np.nan)
    shape = np.asarray(rays).shape[:-1]
    return rgb.reshape(shape + (3,)), depth.reshape(shape), hit.reshape(shape)


def trace_ray(scene: ProceduralScene, ray):
    """Trace a single Plucker ray as an oriented line; depth is the signed
    distance from the ray's canonical reference point to the first hit."""
    rgb, depth, hit = trace_line_batch(scene, np.asarray(ray, dtype=np.float64)[None, :])
    return rgb[0], (float(depth[0]) if hit[0] else None)


# -- cameras ------------------------------------------------------------------


def fibonacci_sphere(n: int):
    """n roughly uniform unit vectors (golden-angle spiral)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    theta = golden * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def look_at_camera(position, width: int, height: int, focal: float | None = None,
                   target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Camera:
    """World-to-camera extrinsics looking from ``position`` to ``target``.

    Camera looks along +z in its own frame; falls back to the x axis as up
    when the view direction hits the pole.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(up, forward))) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x_cam = np.cross(up, forward)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)
    R = np.stack([x_cam, y_cam, forward])
    t = -R @ position
    if focal is None:
        focal = float(width)
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(np.hstack([R, t[:, None]]), K, width, height)


def orbit_camera(azimuth: float, elevation: float, radius: float,
                 width: int, height: int, focal: float | None = None) -> Camera:
    """Camera on an origin-centered orbit (angles in radians)."""
    ce = np.cos(elevation)
    position = radius * np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])
    return look_at_camera(position, width, height, focal)


def orbit_cameras(n: int, radius: float, width: int, height: int,
                  focal: float | None = None):
    """n cameras on the Fibonacci sphere at fixed radius, looking at origin."""
    return [
        look_at_camera(p * radius, width, height, focal) for p in fibonacci_sphere(n)
    ]


# -- dataset -------------------------------------------------------------------


def render_view(scene: ProceduralScene, cam: Camera):
    """Oracle image + depth for one camera (depth from the camera center)."""
    from .rays import rays_from_camera

    rays = rays_from_camera(cam)
    dirs = rays[..., :3].reshape(-1, 3)
    origin = cam.center()
    rgb, depth, _ = trace_batch(scene, np.broadcast_to(origin, dirs.shape), dirs)
    h, w = cam.height, cam.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w)


def _format_floats(values):
    return " ".join(f"{v:.17g}" for v in np.asarray(values, dtype=np.float64).ravel())


def write_cameras_file(path, cameras):
    lines = [f"views {len(cameras)} width {cameras[0].width} height {cameras[0].height}"]
    for i, cam in enumerate(cameras):
        lines.append(
            f"{i:04d} {_format_floats(cam.extrinsics)} {_format_floats(cam.intrinsics)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras_file(path):
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split()
    n, width, height = int(head[1]), int(head[3]), int(head[5])
    cameras = []
    for line in lines[1 : n + 1]:
        nums = [float(x) for x in line.split()[1:]]
        E = np.array(nums[:12]).reshape(3, 4)
        K = np.array(nums[12:21]).reshape(3, 3)
        cameras.append(Camera(E, K, width, height))
    return cameras


@dataclass
class SceneRecord:
    index: int
    split: str
    seed: int | None
    directory: Path
    cameras: list = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def image_path(self, view: int) -> Path:
        return self.directory / "rgb" / f"{view:04d}.png"

    def depth_path(self, view: int) -> Path:
        return self.directory / "depth" / f"{view:04d}.f32"

    def load_image(self, view: int):
        return load_png(self.image_path(view))

    def load_images(self):
        return np.stack([self.load_image(v) for v in range(self.n_views)])

    def load_depth(self, view: int):
        cam = self.cameras[view]
        return read_f32_grid(self.depth_path(view), cam.height, cam.width)


class SceneDataset:
    """Posed multi-view images of N scenes in the documented layout."""

    def __init__(self, root, scenes: list[SceneRecord]):
        self.root = Path(root)
        self.scenes = scenes

    def __len__(self):
        return len(self.scenes)

    def split(self, name: str):
        return [s for s in self.scenes if s.split == name]

    @classmethod
    def load(cls, root) -> "SceneDataset":
        root = Path(root)
        manifest = (root / "manifest.txt").read_text().strip().splitlines()
        if not manifest or not manifest[0].startswith("LFDATASET"):
            raise ValueError(f"{root} does not contain a dataset manifest")
        scenes = []
        for line in manifest:
            parts = line.split()
            if parts[0] != "scene":
                continue
            idx = int(parts[1])
            fields = dict(zip(parts[2::2], parts[3::2]))
            directory = root / f"scene_{idx:04d}"
            scenes.append(
                SceneRecord(
                    index=idx,
                    split=fields.get("split", "train"),
                    seed=None if fields.get("seed", "none") == "none" else int(fields["seed"]),
                    directory=directory,
                    cameras=read_cameras_file(directory / "cameras.txt"),
                )
            )
        return cls(root, scenes)


def render_dataset(scenes, views_per_scene: int, resolution: int, out_dir,
                   *, orbit_radius: float = 2.5, splits=None, seeds=None,
                   write_depth: bool = True, extra_heldout_views: int = 0) -> SceneDataset:
    """Trace every view of every scene and write the dataset to disk.

    Cameras sit on a Fibonacci sphere of radius ``orbit_radius`` looking at
    the origin and are shared across scenes.  ``extra_heldout_views`` appends
    additional poses (offset on the sphere) that consumers can treat as
    novel-view targets.
    """
    if views_per_scene < 1:
        raise ValueError("need at least one view per scene")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_views = views_per_scene + extra_heldout_views
    cameras = orbit_cameras(n_views, orbit_radius, resolution, resolution)

    manifest_lines = [
        "LFDATASET 1",
        f"scenes {len(scenes)} views {views_per_scene} extra_views {extra_heldout_views} "
        f"resolution {resolution} orbit_radius {_format_floats([orbit_radius])}",
    ]
    file_lines = []
    records = []
    for i, scene in enumerate(scenes):
        split = splits[i] if splits else "train"
        seed = seeds[i] if seeds else None
        scene_dir = out_dir / f"scene_{i:04d}"
        (scene_dir / "rgb").mkdir(parents=True, exist_ok=True)
        if write_depth:
            (scene_dir / "depth").mkdir(parents=True, exist_ok=True)
        write_cameras_file(scene_dir / "cameras.txt", cameras)
        for v, cam in enumerate(cameras):
            rgb, depth = render_view(scene, cam)
            save_png(scene_dir / "rgb" / f"{v:04d}.png", rgb)
            if write_depth:
                write_f32_grid(scene_dir / "depth" / f"{v:04d}.f32", depth)
        manifest_lines.append(
            f"scene {i:04d} split {split} seed {seed if seed is not None else 'none'} "
            f"views {n_views}"
        )
        for rel in sorted(p.relative_to(out_dir).as_posix() for p in scene_dir.rglob("*") if p.is_file()):
            digest = hashlib.sha256((out_dir / rel).read_bytes()).hexdigest()
            file_lines.append(f"file {rel} {digest}")
        records.append(SceneRecord(i, split, seed, scene_dir, cameras))

    manifest_lines.extend(file_lines)
    overall = hashlib.sha256("\n".join(file_lines).encode()).hexdigest()
    manifest_lines.append(f"hash {overall}")
    (out_dir / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    return SceneDataset(out_dir, records)
