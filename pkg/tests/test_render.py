import numpy as np

from lightfield.model import LfnModel, decode_radiance, default_lfn_spec
from lightfield.nn import init_params
from lightfield.rays import rays_from_camera
from lightfield.render import (
    render,
    render_video,
    render_volumetric_baseline,
    volumetric_baseline_spec,
)
from lightfield.scenes import look_at_camera, orbit_cameras


def tiny_model(seed=0, hidden=16):
    spec = default_lfn_spec(hidden_dim=hidden)
    return LfnModel(spec, init_params(spec, np.random.default_rng(seed)))


def cam(res=8):
    return look_at_camera((2.5, 0.5, 1.0), res, res)


class TestFieldRender:
    def test_eval_count_is_pixel_count(self):
        frame = render(tiny_model(), look_at_camera((2.5, 0, 0), 2, 2))
        assert frame.eval_count == 4
        for res in (1, 5, 16):
            frame = render(tiny_model(), cam(res))
            assert frame.eval_count == res * res

    def test_model_counter_matches_frame_count(self):
        model = tiny_model()
        frame = render(model, cam(8))
        assert model.eval_count == frame.eval_count == 64

    def test_render_twice_identical(self):
        model = tiny_model(1)
        a = render(model, cam(16))
        b = render(model, cam(16))
        np.testing.assert_array_equal(a.rgb, b.rgb)

    def test_thread_count_does_not_change_pixels(self):
        model = tiny_model(2)
        a = render(model, cam(32), workers=1)
        b = render(model, cam(32), workers=4)
        np.testing.assert_array_equal(a.rgb, b.rgb)

    def test_matches_direct_ray_queries(self):
        model = tiny_model(3)
        camera = cam(16)
        frame = render(model, camera)
        rays = rays_from_camera(camera).reshape(-1, 6)
        expected = decode_radiance(model.query_radiance(rays)).reshape(16, 16, 3)
        np.testing.assert_array_equal(frame.rgb, expected.astype(np.float32))

    def test_output_in_unit_range(self):
        frame = render(tiny_model(4), cam(8))
        assert np.all(frame.rgb >= 0) and np.all(frame.rgb <= 1)
        assert np.all(np.isfinite(frame.rgb))


class TestVolumetricBaseline:
    def test_eval_count_scales_with_samples(self):
        spec = volumetric_baseline_spec(hidden_dim=16, samples_per_ray=64)
        params = init_params(spec.mlp, np.random.default_rng(0))
        frame = render_volumetric_baseline(spec, params, look_at_camera((2.5, 0, 0), 2, 2))
        assert frame.eval_count == 2 * 2 * 64

    def test_eval_ratio_is_exactly_samples_per_ray(self):
        model = tiny_model(5)
        for samples in (8, 64):
            spec = volumetric_baseline_spec(hidden_dim=16, samples_per_ray=samples)
            params = init_params(spec.mlp, np.random.default_rng(1))
            camera = cam(8)
            lfn = render(model, camera)
            base = render_volumetric_baseline(spec, params, camera)
            assert base.eval_count == lfn.eval_count * samples

    def test_deterministic(self):
        spec = volumetric_baseline_spec(hidden_dim=16, samples_per_ray=4)
        params = init_params(spec.mlp, np.random.default_rng(2))
        a = render_volumetric_baseline(spec, params, cam(8), workers=1)
        b = render_volumetric_baseline(spec, params, cam(8), workers=4)
        np.testing.assert_array_equal(a.rgb, b.rgb)


class TestVideo:
    def test_single_pose_single_frame(self, tmp_path):
        paths = render_video(tiny_model(), [cam(8)], tmp_path)
        assert len(paths) == 1 and paths[0].name == "frame_0000.png"
        assert (tmp_path / "render_log.txt").is_file()

    def test_orbit_frames_and_log(self, tmp_path):
        cams = orbit_cameras(5, 2.5, 8, 8)
        paths = render_video(tiny_model(), cams, tmp_path)
        assert [p.name for p in paths] == [f"frame_{i:04d}.png" for i in range(5)]
        lines = (tmp_path / "render_log.txt").read_text().strip().splitlines()
        assert len(lines) == 6
        ms = [float(line.split("ms=")[1].split()[0]) for line in lines[:-1]]
        mean = float(lines[-1].split("mean_ms=")[1].split()[0])
        assert mean == round(float(np.mean(ms)), 3) or abs(mean - np.mean(ms)) < 1e-3
        assert all(f"evals={8 * 8}" in line for line in lines[:-1])
