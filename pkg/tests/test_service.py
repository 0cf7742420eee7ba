import base64
import io
import json
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from PIL import Image

from lightfield.images import png_bytes
from lightfield.model import decode_radiance
from lightfield.nn import mlp_forward
from lightfield.rays import rays_from_camera
from lightfield.service import make_server


@pytest.fixture(scope="module")
def server(tiny_meta_checkpoint):
    srv = make_server(tiny_meta_checkpoint, host="127.0.0.1", port=0,
                      resolution_cap=128)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}", tiny_meta_checkpoint
    srv.shutdown()
    srv.server_close()


def get(url, raw=False):
    with urllib.request.urlopen(url, timeout=30) as resp:
        body = resp.read()
        return (resp.status, dict(resp.headers), body if raw else body.decode())


def post(url, payload, timeout=60):
    req = urllib.request.Request(
        url, data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"}, method="POST",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.status, dict(resp.headers), resp.read()


def post_status(url, payload):
    try:
        return post(url, payload)[0]
    except urllib.error.HTTPError as e:
        e.read()
        return e.code


class TestBasics:
    def test_health(self, server):
        base, _ = server
        status, _, body = get(f"{base}/health")
        assert (status, body) == (200, "ok")

    def test_scenes_listing(self, server):
        base, _ = server
        _, _, body = get(f"{base}/scenes")
        listing = json.loads(body)
        assert listing["scenes"] == ["0", "1", "direct"]

    def test_unknown_route_404(self, server):
        base, _ = server
        with pytest.raises(urllib.error.HTTPError) as exc:
            get(f"{base}/nope")
        assert exc.value.code == 404


class TestRender:
    def test_png_dimensions_and_eval_header(self, server):
        base, _ = server
        status, headers, body = post(f"{base}/render",
                                     {"resolution": 64, "scene": "0"})
        assert status == 200
        assert headers["X-Eval-Count"] == str(64 * 64)
        assert float(headers["X-Render-Ms"]) > 0
        with Image.open(io.BytesIO(body)) as im:
            assert im.size == (64, 64)

    def test_identical_requests_identical_bytes(self, server):
        base, _ = server
        payload = {"resolution": 32, "azimuth": 0.7, "elevation": 0.2, "scene": "1"}
        _, _, a = post(f"{base}/render", payload)
        _, _, b = post(f"{base}/render", payload)
        assert a == b

    def test_eight_concurrent_requests_agree(self, server):
        base, _ = server
        payload = {"resolution": 32, "azimuth": -0.4, "elevation": 0.5, "scene": "0"}
        with ThreadPoolExecutor(max_workers=8) as pool:
            bodies = list(pool.map(lambda _: post(f"{base}/render", payload)[2], range(8)))
        assert all(b == bodies[0] for b in bodies)

    def test_matches_direct_local_render(self, server):
        base, ckpt = server
        pose = {"azimuth": 0.3, "elevation": -0.25, "radius": 2.5, "resolution": 24,
                "scene": "direct"}
        _, _, body = post(f"{base}/render", pose)
        from lightfield.scenes import orbit_camera

        cam = orbit_camera(0.3, -0.25, 2.5, 24, 24)
        rays = rays_from_camera(cam).reshape(-1, 6).astype(np.float32)
        rgb = decode_radiance(
            mlp_forward(ckpt.lfn_spec, ckpt.arrays["lfn_params"], rays)
        ).reshape(24, 24, 3)
        assert body == png_bytes(rgb)


class TestValidation:
    def test_malformed_body_400(self, server):
        base, _ = server
        req = urllib.request.Request(f"{base}/render", data=b"{not json",
                                     headers={"Content-Type": "application/json"},
                                     method="POST")
        with pytest.raises(urllib.error.HTTPError) as exc:
            urllib.request.urlopen(req, timeout=10)
        assert exc.value.code == 400
        exc.value.read()

    def test_over_cap_resolution_422(self, server):
        base, _ = server
        assert post_status(f"{base}/render", {"resolution": 4096}) == 422

    def test_radius_bounds_422(self, server):
        base, _ = server
        assert post_status(f"{base}/render", {"resolution": 16, "radius": 0.1}) == 422

    def test_unknown_scene_400(self, server):
        base, _ = server
        assert post_status(f"{base}/render", {"resolution": 16, "scene": "77"}) == 400

    def test_raw_pose_disabled_by_default(self, server):
        base, _ = server
        cam = {"extrinsics": list(np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()),
               "intrinsics": list(np.eye(3).ravel()), "width": 8, "height": 8}
        assert post_status(f"{base}/render", cam) == 400


class TestEpiAndDepth:
    def test_epi_panel_size(self, server):
        base, _ = server
        _, _, body = post(f"{base}/epi", {"resolution": 16, "u": 8, "v": 8,
                                          "grid": 24, "scene": "0"})
        with Image.open(io.BytesIO(body)) as im:
            assert im.size == (24, 24)

    def test_epi_pixel_outside_image_400(self, server):
        base, _ = server
        assert post_status(f"{base}/epi", {"resolution": 16, "u": 99, "v": 0}) == 400

    def test_depth_view(self, server):
        base, _ = server
        status, headers, body = post(f"{base}/depth", {"resolution": 8, "scene": "0"})
        assert status == 200
        assert 0.0 <= float(headers["X-Valid-Fraction"]) <= 1.0
        with Image.open(io.BytesIO(body)) as im:
            assert im.size == (8, 8)


class TestInferJob:
    def test_infer_roundtrip(self, server):
        base, ckpt = server
        # render a view of scene 0, then hand it back as an observation
        _, _, observed = post(f"{base}/render",
                              {"resolution": 16, "scene": "0", "azimuth": 0.1})
        payload = {
            "image_png_base64": base64.b64encode(observed).decode(),
            "pose": {"azimuth": 0.1, "elevation": 0.0, "radius": 2.5, "resolution": 16},
            "steps": 4,
        }
        status, _, body = post(f"{base}/infer", payload)
        assert status == 202
        job = json.loads(body)
        deadline = time.time() + 60
        state = {}
        while time.time() < deadline:
            _, _, body = get(f"{base}/infer/{job['id']}")
            state = json.loads(body)
            if state["status"] in ("done", "error"):
                break
            time.sleep(0.1)
        assert state["status"] == "done", state
        assert state["progress"] == 1.0
        scene_id = state["scene"]
        status, headers, _ = post(f"{base}/render",
                                  {"resolution": 16, "scene": scene_id})
        assert status == 200
        assert headers["X-Eval-Count"] == "256"

    def test_unknown_job_400(self, server):
        base, _ = server
        with pytest.raises(urllib.error.HTTPError) as exc:
            get(f"{base}/infer/deadbeef")
        assert exc.value.code == 400
        exc.value.read()

    def test_missing_image_400(self, server):
        base, _ = server
        assert post_status(f"{base}/infer", {"steps": 1}) == 400
