"""HTTP render service: frames, EPI slices, depth views and latent inference
over a loaded checkpoint.

Endpoints (JSON in, PNG or JSON out):

* ``GET  /health``            -> ``ok``
* ``GET  /scenes``            -> available latents (training + inferred)
* ``POST /render``            -> PNG frame; headers ``X-Eval-Count``, ``X-Render-Ms``
* ``POST /depth``             -> PNG sparse-depth view; ``X-Valid-Fraction``
* ``POST /epi``               -> PNG epipolar slice for one pixel's ray
* ``POST /infer``             -> start single-image latent inference, returns job id
* ``GET  /infer/<id>``        -> job status/progress, scene id when done

Poses travel as orbit parameters (azimuth/elevation radians, radius,
resolution) looking at the origin; raw camera matrices are accepted only
when the server was started with ``allow_raw_pose``.  The loaded checkpoint
is immutable; renders run concurrently, while inference jobs run one at a
time in a background worker and publish their latent under a lock.
"""

from __future__ import annotations

import base64
import io
import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from .depth import sparse_depth_map
from .images import png_bytes
from .model import Checkpoint, LfnModel
from .rays import Camera, rays_from_camera
from .render import render
from .scenes import orbit_camera
from .training import InferConfig, infer_latent

DEFAULT_RESOLUTION_CAP = 256
MIN_ORBIT_RADIUS = 1.2
MAX_ORBIT_RADIUS = 50.0


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class PoseRequest:
    azimuth: float
    elevation: float
    radius: float
    resolution: int
    scene: str  # training index as str, or "inferred:<id>"

    @classmethod
    def parse(cls, body: dict, cap: int) -> "PoseRequest":
        try:
            pose = cls(
                azimuth=float(body.get("azimuth", 0.0)),
                elevation=float(body.get("elevation", 0.0)),
                radius=float(body.get("radius", 2.5)),
                resolution=int(body.get("resolution", 64)),
                scene=str(body.get("scene", "0")),
            )
        except (TypeError, ValueError) as e:
            raise RequestError(400, f"malformed pose request: {e}") from e
        if pose.resolution < 1:
            raise RequestError(400, "resolution must be positive")
        if pose.resolution > cap:
            raise RequestError(422, f"resolution {pose.resolution} exceeds cap {cap}")
        if not MIN_ORBIT_RADIUS <= pose.radius <= MAX_ORBIT_RADIUS:
            raise RequestError(
                422,
                f"radius {pose.radius} outside scene bounds "
                f"[{MIN_ORBIT_RADIUS}, {MAX_ORBIT_RADIUS}]",
            )
        return pose

    def camera(self) -> Camera:
        return orbit_camera(self.azimuth, self.elevation, self.radius,
                            self.resolution, self.resolution)


def camera_from_json(body: dict) -> Camera:
    try:
        E = np.array(body["extrinsics"], dtype=np.float64).reshape(3, 4)
        K = np.array(body["intrinsics"], dtype=np.float64).reshape(3, 3)
        return Camera(E, K, int(body["width"]), int(body["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise RequestError(400, f"malformed camera: {e}") from e


@dataclass
class InferJob:
    job_id: str
    image: np.ndarray
    camera: Camera
    config: InferConfig
    status: str = "queued"
    progress: float = 0.0
    error: str = ""
    scene_id: str = ""


class ServiceState:
    """Checkpoint plus the single-worker inference queue."""

    def __init__(self, checkpoint: Checkpoint, resolution_cap: int = DEFAULT_RESOLUTION_CAP,
                 allow_raw_pose: bool = False):
        self.checkpoint = checkpoint
        self.resolution_cap = resolution_cap
        self.allow_raw_pose = allow_raw_pose
        self._lock = threading.Lock()
        self._models: dict[str, LfnModel] = {}
        self._jobs: dict[str, InferJob] = {}
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._work, daemon=True)
        self._worker.start()

    # -- scenes / models ------------------------------------------------------

    def scene_ids(self):
        with self._lock:
            inferred = [k for k in self._models if k.startswith("inferred:")]
        training = [str(i) for i in range(self.checkpoint.n_scenes)]
        if "lfn_params" in self.checkpoint.arrays:
            training.append("direct")
        return training, inferred

    def model_for(self, scene: str) -> LfnModel:
        with self._lock:
            if scene in self._models:
                return self._models[scene]
        if scene == "direct":
            model = self.checkpoint.lfn_model(None)
        elif scene.startswith("inferred:"):
            raise RequestError(400, f"unknown inferred scene {scene!r}")
        else:
            try:
                index = int(scene)
            except ValueError:
                raise RequestError(400, f"bad scene selector {scene!r}") from None
            try:
                model = self.checkpoint.lfn_model(index)
            except Exception as e:
                raise RequestError(400, str(e)) from e
        with self._lock:
            self._models.setdefault(scene, model)
            return self._models[scene]

    # -- inference jobs ----------------------------------------------------------

    def submit_infer(self, image, camera, config: InferConfig) -> str:
        if self.checkpoint.hyper_spec is None:
            raise RequestError(400, "checkpoint has no hypernetwork; cannot infer")
        job = InferJob(job_id=uuid.uuid4().hex[:12], image=image, camera=camera,
                       config=config)
        with self._lock:
            self._jobs[job.job_id] = job
        self._queue.put(job.job_id)
        return job.job_id

    def job_status(self, job_id: str) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise RequestError(400, f"unknown inference job {job_id!r}")
            return {
                "id": job.job_id,
                "status": job.status,
                "progress": job.progress,
                "scene": job.scene_id,
                "error": job.error,
            }

    def _work(self):
        while True:
            job_id = self._queue.get()
            with self._lock:
                job = self._jobs[job_id]
                job.status = "running"
            try:

                def report(step, total):
                    with self._lock:
                        job.progress = step / total

                _, model, _ = infer_latent(
                    self.checkpoint, (job.image, job.camera), job.config,
                    progress=report,
                )
                scene_id = f"inferred:{job.job_id}"
                with self._lock:
                    self._models[scene_id] = model
                    job.scene_id = scene_id
                    job.status = "done"
                    job.progress = 1.0
            except Exception as e:  # worker must survive bad jobs
                with self._lock:
                    job.status = "error"
                    job.error = str(e)


def _depth_view_png(model: LfnModel, cam: Camera):
    dmap = sparse_depth_map(model, cam)
    rgb = np.zeros((cam.height, cam.width, 3), dtype=np.float32)
    if np.any(dmap.valid):
        vals = dmap.depth[dmap.valid]
        lo, hi = float(vals.min()), float(vals.max())
        span = hi - lo if hi > lo else 1.0
        norm = 1.0 - (dmap.depth - lo) / span  # near = bright
        for c in range(3):
            rgb[..., c] = np.where(dmap.valid, norm, 0.0)
    return png_bytes(rgb), dmap.valid_fraction


def _epi_png(model: LfnModel, cam: Camera, u: int, v: int, half_span: float, grid: int):
    from .depth import sample_epi
    from .rays import two_plane_basis

    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise RequestError(400, f"pixel ({u}, {v}) outside image")
    ray = rays_from_camera(cam)[v, u]
    basis = two_plane_basis(ray, gap=1.0)
    coords = np.linspace(-half_span, half_span, grid)
    epi = sample_epi(model, basis, coords, coords)
    return png_bytes(epi.rgb)


class _Handler(BaseHTTPRequestHandler):
    state: ServiceState = None  # injected by make_server
    protocol_version = "HTTP/1.1"

    # -- plumbing ---------------------------------------------------------------

    def log_message(self, *args):
        pass

    def _send(self, status: int, body: bytes, content_type: str, headers=None):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        for key, value in (headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, payload: dict, headers=None):
        self._send(status, json.dumps(payload).encode(), "application/json", headers)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise RequestError(400, "empty request body")
        try:
            body = json.loads(raw)
        except json.JSONDecodeError as e:
            raise RequestError(400, f"request body is not valid JSON: {e}") from e
        if not isinstance(body, dict):
            raise RequestError(400, "request body must be a JSON object")
        return body

    def _camera_from_body(self, body: dict):
        if "extrinsics" in body or "intrinsics" in body:
            if not self.state.allow_raw_pose:
                raise RequestError(400, "raw camera matrices are disabled on this server")
            cam = camera_from_json(body)
            if cam.width > self.state.resolution_cap or cam.height > self.state.resolution_cap:
                raise RequestError(422, f"resolution exceeds cap {self.state.resolution_cap}")
            scene = str(body.get("scene", "0"))
            return cam, scene
        pose = PoseRequest.parse(body, self.state.resolution_cap)
        return pose.camera(), pose.scene

    # -- routes -------------------------------------------------------------------

    def do_OPTIONS(self):
        self._send(204, b"", "text/plain")

    def do_GET(self):
        try:
            if self.path == "/health":
                self._send(200, b"ok", "text/plain")
            elif self.path == "/scenes":
                training, inferred = self.state.scene_ids()
                self._send_json(200, {"scenes": training, "inferred": inferred})
            elif self.path.startswith("/infer/"):
                self._send_json(200, self.state.job_status(self.path[len("/infer/"):]))
            else:
                self._send(404, b"not found", "text/plain")
        except RequestError as e:
            self._send(e.status, str(e).encode(), "text/plain")
        except Exception as e:
            self._send(500, f"internal error: {e}".encode(), "text/plain")

    def do_POST(self):
        try:
            body = self._read_json()
            if self.path == "/render":
                cam, scene = self._camera_from_body(body)
                model = self.state.model_for(scene)
                t0 = time.perf_counter()
                frame = render(model, cam)
                ms = (time.perf_counter() - t0) * 1e3
                self._send(200, png_bytes(frame.rgb), "image/png", {
                    "X-Eval-Count": str(frame.eval_count),
                    "X-Render-Ms": f"{ms:.3f}",
                })
            elif self.path == "/depth":
                cam, scene = self._camera_from_body(body)
                model = self.state.model_for(scene)
                t0 = time.perf_counter()
                png, valid_fraction = _depth_view_png(model, cam)
                ms = (time.perf_counter() - t0) * 1e3
                self._send(200, png, "image/png", {
                    "X-Valid-Fraction": f"{valid_fraction:.5f}",
                    "X-Render-Ms": f"{ms:.3f}",
                })
            elif self.path == "/epi":
                cam, scene = self._camera_from_body(body)
                model = self.state.model_for(scene)
                u = int(body.get("u", cam.width // 2))
                v = int(body.get("v", cam.height // 2))
                half_span = float(body.get("half_span", 0.15))
                grid = int(body.get("grid", 64))
                if not 2 <= grid <= self.state.resolution_cap:
                    raise RequestError(422, f"grid must be in [2, {self.state.resolution_cap}]")
                self._send(200, _epi_png(model, cam, u, v, half_span, grid), "image/png")
            elif self.path == "/infer":
                if "image_png_base64" not in body:
                    raise RequestError(400, "missing image_png_base64")
                try:
                    raw = base64.b64decode(body["image_png_base64"])
                    with Image.open(io.BytesIO(raw)) as im:
                        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
                except Exception as e:
                    raise RequestError(400, f"bad image payload: {e}") from e
                if "camera" in body:
                    cam = camera_from_json(body["camera"])
                else:
                    pose = PoseRequest.parse(body.get("pose", {}), self.state.resolution_cap)
                    cam = orbit_camera(pose.azimuth, pose.elevation, pose.radius,
                                       image.shape[1], image.shape[0])
                if image.shape[:2] != (cam.height, cam.width):
                    raise RequestError(400, "image size does not match camera")
                cfg = InferConfig(
                    steps=int(body.get("steps", 300)),
                    lr=float(body.get("lr", 1e-2)),
                    lambda_lat=float(body.get("lambda_lat", 1e-3)),
                )
                job_id = self.state.submit_infer(image, cam, cfg)
                self._send_json(202, {"id": job_id, "poll": f"/infer/{job_id}"})
            else:
                self._send(404, b"not found", "text/plain")
        except RequestError as e:
            self._send(e.status, str(e).encode(), "text/plain")
        except Exception as e:
            self._send(500, f"internal error: {e}".encode(), "text/plain")


def make_server(checkpoint: Checkpoint, host: str = "127.0.0.1", port: int = 8080,
                resolution_cap: int = DEFAULT_RESOLUTION_CAP,
                allow_raw_pose: bool = False) -> ThreadingHTTPServer:
    """Build (but do not start) the threaded HTTP server."""
    state = ServiceState(checkpoint, resolution_cap, allow_raw_pose)
    handler = type("Handler", (_Handler,), {"state": state})
    server = ThreadingHTTPServer((host, port), handler)
    server.state = state
    return server


def serve(checkpoint: Checkpoint, host: str = "127.0.0.1", port: int = 8080,
          resolution_cap: int = DEFAULT_RESOLUTION_CAP, allow_raw_pose: bool = False):
    server = make_server(checkpoint, host, port, resolution_cap, allow_raw_pose)
    print(f"serving on http://{host}:{server.server_address[1]} "
          f"(cap {resolution_cap}px, raw poses {'on' if allow_raw_pose else 'off'})",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
