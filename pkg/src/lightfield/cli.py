"""Command-line entry points.

Subcommands: ``dataset-gen``, ``train``, ``infer``, ``render``, ``depth``,
``epi``, ``bench``, ``serve``.  Every run that writes outputs also writes a
reproducibility record (resolved arguments, seeds, and content hashes of the
inputs it read) next to them.  Angles are radians throughout, matching the
HTTP service.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out_dir, args, inputs=()):
    """Config + seeds + content hashes of inputs, for reproducibility."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "argv": sys.argv[1:],
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "inputs": {},
    }
    for path in inputs:
        path = Path(path)
        if path.is_file():
            record["inputs"][str(path)] = _hash_file(path)
        elif path.is_dir():
            manifest = path / "manifest.txt"
            if manifest.is_file():
                record["inputs"][str(manifest)] = _hash_file(manifest)
    (out_dir / "run_record.txt").write_text(json.dumps(record, indent=2, default=str) + "\n")


def _load_checkpoint(path):
    from .model import Checkpoint

    return Checkpoint.load(path)


def _pose_camera(args, resolution=None):
    from .scenes import orbit_camera

    res = resolution if resolution is not None else args.res
    return orbit_camera(args.azimuth, args.elevation, args.radius, res, res)


def _model_from(args, checkpoint):
    scene = getattr(args, "scene", None)
    if scene is None or scene == "direct":
        if "lfn_params" in checkpoint.arrays:
            return checkpoint.lfn_model(None)
        scene = 0
    return checkpoint.lfn_model(int(scene))


# -- subcommands --------------------------------------------------------------


def cmd_dataset_gen(args):
    from .scenes import generate_scene, render_dataset

    seeds = [args.seed + i for i in range(args.scenes)]
    scenes = [generate_scene(s) for s in seeds]
    splits = ["heldout" if i >= args.scenes - args.heldout_scenes else "train"
              for i in range(args.scenes)]
    t0 = time.perf_counter()
    render_dataset(
        scenes, args.views, args.res, args.out,
        orbit_radius=args.radius, splits=splits, seeds=seeds,
        write_depth=not args.no_depth, extra_heldout_views=args.extra_views,
    )
    write_run_record(args.out, args)
    total = args.scenes * (args.views + args.extra_views)
    print(f"wrote {args.scenes} scenes / {total} images to {args.out} "
          f"({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_train(args):
    from .model import default_lfn_spec
    from .scenes import SceneDataset
    from .training import TrainConfig, train_prior, train_scene

    dataset = SceneDataset.load(args.dataset)
    lfn_spec = default_lfn_spec(pe_freqs=args.pe, hidden_dim=args.hidden)
    cfg = TrainConfig(
        steps=args.steps, ray_batch_size=args.batch,
        scenes_per_batch=args.scenes_per_batch, lr=args.lr,
        lambda_lat=args.lambda_lat, latent_dim=args.latent_dim,
        seed=args.seed, validate_every=args.validate_every,
    )
    write_run_record(args.out, args, [Path(args.dataset)])
    t0 = time.perf_counter()
    if args.mode == "single":
        record = dataset.scenes[args.scene]
        n_views = args.views or record.n_views
        images = np.stack([record.load_image(v) for v in range(n_views)])
        cameras = record.cameras[:n_views]
        ckpt, curve = train_scene(images, cameras, cfg, lfn_spec,
                                  out_dir=args.out, quiet=False)
    else:
        ckpt, curve = train_prior(dataset, cfg, lfn_spec,
                                  hyper_hidden=args.hyper_hidden,
                                  n_views=args.views, out_dir=args.out,
                                  checkpoint_every=args.checkpoint_every, quiet=False)
    minutes = (time.perf_counter() - t0) / 60
    last_val = curve.val_psnr[-1] if curve.val_psnr else float("nan")
    print(f"trained {cfg.steps} steps in {minutes:.1f} min; "
          f"final val PSNR {last_val:.2f} dB; checkpoint in {args.out}")
    return EXIT_OK


def cmd_infer(args):
    from .metrics import psnr
    from .model import Checkpoint, decode_radiance
    from .nn import mlp_forward
    from .rays import rays_from_camera
    from .scenes import SceneDataset
    from .training import InferConfig, infer_latent

    checkpoint = _load_checkpoint(args.checkpoint)
    dataset = SceneDataset.load(args.dataset)
    record = dataset.scenes[args.scene]
    image = record.load_image(args.view)
    cam = record.cameras[args.view]
    cfg = InferConfig(steps=args.steps, lr=args.lr, lambda_lat=args.lambda_lat,
                      seed=args.seed)
    t0 = time.perf_counter()
    z, model, _ = infer_latent(checkpoint, (image, cam), cfg)
    seconds = time.perf_counter() - t0

    out_ckpt = Checkpoint(
        lfn_spec=checkpoint.lfn_spec, step=checkpoint.step,
        hyper_spec=checkpoint.hyper_spec, lambda_lat=checkpoint.lambda_lat,
        arrays={"hyper_params": checkpoint.arrays["hyper_params"],
                "latents": z[None, :], "lfn_params": model.params},
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_ckpt.save(out_dir / "inferred.ckpt")
    write_run_record(args.out, args, [Path(args.checkpoint), Path(args.dataset)])

    lines = [f"inferred latent |z|={float(np.linalg.norm(z)):.3f} in {seconds:.1f}s"]
    others = [v for v in range(record.n_views) if v != args.view][: args.eval_views]
    if others:
        vals = []
        for v in others:
            rays = rays_from_camera(record.cameras[v]).reshape(-1, 6).astype(np.float32)
            pred = decode_radiance(mlp_forward(checkpoint.lfn_spec, model.params, rays))
            target = record.load_image(v)
            vals.append(psnr(pred.reshape(target.shape), target))
        lines.append(f"novel-view PSNR over {len(vals)} views: {np.mean(vals):.2f} dB")
    print("; ".join(lines))
    return EXIT_OK


def cmd_render(args):
    from .images import save_png
    from .render import render

    checkpoint = _load_checkpoint(args.checkpoint)
    model = _model_from(args, checkpoint)
    cam = _pose_camera(args)
    frame = render(model, cam)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(out, frame.rgb)
    write_run_record(out.parent, args, [Path(args.checkpoint)])
    print(f"frame={out} ms={frame.wall_time * 1e3:.3f} evals={frame.eval_count}")
    return EXIT_OK


def cmd_depth(args):
    from .depth import backproject_pointcloud, save_depth_map, save_pointcloud, sparse_depth_map
    from .images import save_png
    from .render import render

    checkpoint = _load_checkpoint(args.checkpoint)
    model = _model_from(args, checkpoint)
    cam = _pose_camera(args)
    t0 = time.perf_counter()
    dmap = sparse_depth_map(model, cam)
    seconds = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_depth_map(out, dmap)
    if args.png:
        vis = np.zeros((cam.height, cam.width, 3), dtype=np.float32)
        if np.any(dmap.valid):
            vals = dmap.depth[dmap.valid]
            span = max(float(vals.max() - vals.min()), 1e-9)
            norm = 1.0 - (dmap.depth - float(vals.min())) / span
            vis[dmap.valid] = norm[dmap.valid, None]
        save_png(args.png, vis)
    if args.cloud:
        frame = render(model, cam)
        points, colors = backproject_pointcloud([(dmap, cam)], [frame.rgb])
        save_pointcloud(args.cloud, points, colors)
    write_run_record(out.parent, args, [Path(args.checkpoint)])
    print(f"depth={out} valid_fraction={dmap.valid_fraction:.4f} s={seconds:.2f}")
    return EXIT_OK


def cmd_epi(args):
    from .depth import sample_epi
    from .images import save_png
    from .rays import rays_from_camera, two_plane_basis

    checkpoint = _load_checkpoint(args.checkpoint)
    model = _model_from(args, checkpoint)
    cam = _pose_camera(args)
    u, v = (int(x) for x in args.pixel.split(","))
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    ray = rays_from_camera(cam)[v, u]
    basis = two_plane_basis(ray, gap=1.0)
    coords = np.linspace(-args.half_span, args.half_span, args.grid)
    epi = sample_epi(model, basis, coords, coords)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(out, epi.rgb)
    write_run_record(out.parent, args, [Path(args.checkpoint)])
    print(f"epi={out} grid={args.grid}x{args.grid} half_span={args.half_span}")
    return EXIT_OK


def cmd_bench(args):
    from .metrics import bench_kernels, bench_rendering
    from .model import LfnModel, default_lfn_spec
    from .nn import init_params
    from .render import volumetric_baseline_spec

    if args.checkpoint:
        checkpoint = _load_checkpoint(args.checkpoint)
        model = _model_from(args, checkpoint)
    else:
        spec = default_lfn_spec(hidden_dim=args.hidden)
        model = LfnModel(spec, init_params(spec, np.random.default_rng(0)))
    hidden = model.spec.hidden_dim
    bspec = volumetric_baseline_spec(hidden_dim=hidden, num_layers=model.spec.num_layers,
                                     samples_per_ray=args.samples)
    bparams = init_params(bspec.mlp, np.random.default_rng(1))
    cam = _pose_camera(args)
    report = bench_rendering(model, cam, bspec, bparams, runs=args.runs)
    print(report.to_text(), end="")
    if args.kernels:
        results = bench_kernels(hidden_dim=hidden, num_layers=model.spec.num_layers)
        for name, us in sorted(results.items()):
            print(f"kernel {name} us_per_pass {us:.1f} "
                  f"({4096 * 1e3 / us:.0f}k rays/s at batch 4096)")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_text())
        write_run_record(Path(args.out).parent, args,
                         [Path(args.checkpoint)] if args.checkpoint else [])
    return EXIT_OK


def cmd_serve(args):
    from .service import serve

    checkpoint = _load_checkpoint(args.checkpoint)
    serve(checkpoint, host=args.host, port=args.port,
          resolution_cap=args.res_cap, allow_raw_pose=args.allow_raw_pose)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _add_pose_args(p, default_res=64):
    p.add_argument("--azimuth", type=float, default=0.0, help="radians")
    p.add_argument("--elevation", type=float, default=0.3, help="radians")
    p.add_argument("--radius", type=float, default=2.5)
    p.add_argument("--res", type=int, default=default_res)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lightfield",
        description="Train, render and analyze neural light fields.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="generate a procedural multi-view dataset")
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--views", type=int, default=25)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=2.5)
    p.add_argument("--heldout-scenes", type=int, default=0)
    p.add_argument("--extra-views", type=int, default=0)
    p.add_argument("--no-depth", action="store_true")
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("train", help="train a latent prior or overfit one scene")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["prior", "single"], default="prior")
    p.add_argument("--scene", type=int, default=0, help="scene index for --mode single")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--scenes-per-batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda-lat", type=float, default=1e-3)
    p.add_argument("--latent-dim", type=int, default=256)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--hyper-hidden", type=int, default=256)
    p.add_argument("--pe", type=int, default=0, help="positional encoding frequencies")
    p.add_argument("--views", type=int, default=0, help="train on first N views (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--validate-every", type=int, default=200)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="optimize a latent for one observation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--lambda-lat", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-views", type=int, default=4)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="render one frame from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", default=None)
    p.add_argument("--out", required=True)
    _add_pose_args(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("depth", help="extract a sparse depth map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", default=None)
    p.add_argument("--out", required=True, help="output .f32 grid")
    p.add_argument("--png", default=None, help="optional visualization PNG")
    p.add_argument("--cloud", default=None, help="optional XYZRGB point cloud")
    _add_pose_args(p)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("epi", help="sample an epipolar plane image at a pixel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", default=None)
    p.add_argument("--pixel", default="32,32", help="u,v pixel of the seed ray")
    p.add_argument("--half-span", type=float, default=0.15)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--out", required=True)
    _add_pose_args(p)
    p.set_defaults(func=cmd_epi)

    p = sub.add_parser("bench", help="rendering cost: field vs ray-march baseline")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scene", default=None)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--kernels", action="store_true", help="also bench kernel impls")
    p.add_argument("--out", default=None)
    _add_pose_args(p, default_res=128)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="HTTP render service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=int(__import__("os").environ.get("LIGHTFIELD_PORT", 8080)))
    p.add_argument("--res-cap", type=int, default=256)
    p.add_argument("--allow-raw-pose", action="store_true")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
