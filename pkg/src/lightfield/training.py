"""Auto-decoder training over many scenes and test-time latent inference.

Training jointly optimizes per-scene latent codes and the hypernetwork that
maps codes to field parameters, minimizing squared reconstruction error over
random rays plus a zero-mean Gaussian prior on the codes.  Inference freezes
the hypernetwork and optimizes a fresh code against a single observation.

Every step samples ``scenes_per_batch`` scenes and ``ray_batch_size``
(pixel, view) pairs per scene -- an unbiased stochastic estimate of the full
objective, which sums over entire images.  Latent rows not touched by a step
are not updated (their Adam state and bias-correction clock are per row).
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def _blas_single_thread(fn):
    """Run the wrapped optimization loop with BLAS threading off: training
    batches are too small for it to pay off, and the fan-out overhead costs
    ~25% per step on few-core machines."""
    if threadpool_limits is None:  # pragma: no cover
        return fn

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with threadpool_limits(limits=1, user_api="blas"):
            return fn(*args, **kwargs)

    return wrapper

from .autodiff import Tape
from .metrics import psnr
from .model import (
    Checkpoint,
    LfnModel,
    decode_radiance,
    default_lfn_spec,
    encode_image,
    init_hypernetwork,
)
from .nn import AdamState, MlpSpec, TrainingError, adam_step, init_params, mlp_forward
from .rays import Camera, rays_from_camera


@dataclass
class TrainConfig:
    steps: int = 2000
    ray_batch_size: int = 512
    scenes_per_batch: int = 16
    lr: float = 1e-4
    lambda_lat: float = 1e-3
    latent_dim: int = 256
    seed: int = 0
    validate_every: int = 200

    def __post_init__(self):
        if min(self.steps, self.ray_batch_size, self.scenes_per_batch,
               self.latent_dim) <= 0 or self.lr <= 0 or self.validate_every <= 0:
            raise ValueError("config values must be positive")
        if self.lambda_lat < 0:
            raise ValueError("lambda_lat must be non-negative")


@dataclass
class InferConfig:
    steps: int = 400
    ray_batch_size: int = 1024
    lr: float = 1e-2
    lambda_lat: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.ray_batch_size <= 0 or self.lr <= 0:
            raise ValueError("config values must be positive")
        if self.lambda_lat < 0:
            raise ValueError("lambda_lat must be non-negative")


@dataclass
class LossCurve:
    steps: list = field(default_factory=list)
    data_loss: list = field(default_factory=list)
    prior_loss: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_psnr: list = field(default_factory=list)

    def log_lines(self):
        val = dict(zip(self.val_steps, self.val_psnr))
        lines = []
        for s, d, p in zip(self.steps, self.data_loss, self.prior_loss):
            line = f"step={s:06d} data={d:.8f} prior={p:.8f}"
            if s in val:
                line += f" val_psnr={val[s]:.3f}"
            lines.append(line)
        return lines

    def save(self, path):
        Path(path).write_text("\n".join(self.log_lines()) + "\n")


@dataclass
class _SceneBuffers:
    """Targets and rays of one scene, flattened to (views, pixels, ...)."""

    targets: np.ndarray  # (V, H*W, 3) in value space
    rays: np.ndarray  # (V, H*W, 6) float32

    @property
    def n_views(self):
        return self.targets.shape[0]

    @property
    def n_pixels(self):
        return self.targets.shape[1]


def _load_buffers(records, n_views=None):
    """Per-scene target buffers; ray grids are shared between scenes that use
    the same camera rig (the common case for generated datasets)."""
    ray_cache = {}
    buffers = []
    for rec in records:
        cams = rec.cameras if n_views is None else rec.cameras[:n_views]
        key = tuple(
            (tuple(c.extrinsics.ravel()), tuple(c.intrinsics.ravel()), c.width, c.height)
            for c in cams
        )
        if key not in ray_cache:
            ray_cache[key] = np.stack(
                [rays_from_camera(c).reshape(-1, 6).astype(np.float32) for c in cams]
            )
        images = np.stack([rec.load_image(v) for v in range(len(cams))])
        v, h, w, _ = images.shape
        buffers.append(
            _SceneBuffers(
                targets=encode_image(images).reshape(v, h * w, 3).astype(np.float32),
                rays=ray_cache[key],
            )
        )
    return buffers


def _adam_rows(values, grads, m, v, steps, rows, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam restricted to selected rows, with per-row bias-correction clocks."""
    g = grads[rows]
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite latent gradient")
    steps[rows] += 1
    t = steps[rows][:, None]
    m[rows] = beta1 * m[rows] + (1 - beta1) * g
    v[rows] = beta2 * v[rows] + (1 - beta2) * g * g
    m_hat = m[rows] / (1 - beta1**t)
    v_hat = v[rows] / (1 - beta2**t)
    values[rows] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _validation_psnr(lfn_spec, params, record, view: int = 0) -> float:
    cam = record.cameras[view]
    rays = rays_from_camera(cam).reshape(-1, 6).astype(np.float32)
    pred = decode_radiance(mlp_forward(lfn_spec, params, rays))
    target = record.load_image(view).reshape(-1, 3)
    return psnr(pred.reshape(target.shape), target)


@_blas_single_thread
def train_prior(dataset, cfg: TrainConfig, lfn_spec: MlpSpec | None = None,
                hyper_hidden: int = 256, n_views: int | None = None,
                out_dir=None, init_latents=None, checkpoint_every: int = 0,
                quiet: bool = True):
    """Fit the latent prior: hypernetwork plus one latent code per scene.

    Returns ``(Checkpoint, LossCurve)``.  With ``out_dir`` set, writes the
    loss log, periodic checkpoints and (on a non-finite abort) the last good
    checkpoint there.
    """
    records = dataset.split("train")
    if not records:
        raise ValueError("dataset has no training scenes")
    lfn_spec = lfn_spec or default_lfn_spec()
    rng = np.random.default_rng(cfg.seed)
    buffers = _load_buffers(records, n_views)
    n_scenes = len(records)

    hyper = init_hypernetwork(lfn_spec, cfg.latent_dim, rng, hidden_dim=hyper_hidden)
    latents = (
        np.zeros((n_scenes, cfg.latent_dim), dtype=np.float32)
        if init_latents is None
        else np.array(init_latents, dtype=np.float32, copy=True)
    )
    psi_state = AdamState.like(hyper.params)
    m_lat = np.zeros_like(latents)
    v_lat = np.zeros_like(latents)
    t_lat = np.zeros(n_scenes, dtype=np.int64)

    curve = LossCurve()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot(step):
        return Checkpoint(
            lfn_spec=lfn_spec,
            step=step,
            hyper_spec=hyper.spec,
            lambda_lat=cfg.lambda_lat,
            arrays={"hyper_params": hyper.params.copy(), "latents": latents.copy()},
        )

    last_good = snapshot(0)
    t_start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n_scenes, size=min(cfg.scenes_per_batch, n_scenes), replace=False)
        tape = Tape()
        psi_var = tape.leaf(hyper.params)
        z_var = tape.leaf(latents[idx])
        phi_batch = mlp_forward(hyper.spec, psi_var, z_var, tape)

        data_terms = None
        for j, scene_i in enumerate(idx):
            buf = buffers[scene_i]
            vi = rng.integers(buf.n_views, size=cfg.ray_batch_size)
            pi = rng.integers(buf.n_pixels, size=cfg.ray_batch_size)
            rays = buf.rays[vi, pi]
            target = buf.targets[vi, pi]
            phi_j = tape.take_row(phi_batch, j)
            pred = mlp_forward(lfn_spec, phi_j, tape.leaf(rays), tape)
            diff = tape.sub(pred, tape.leaf(target))
            term = tape.sum(tape.mul(diff, diff))
            data_terms = term if data_terms is None else tape.add(data_terms, term)

        n_samples = len(idx) * cfg.ray_batch_size * 3
        data_mean = tape.scale(data_terms, 1.0 / n_samples)
        prior_mean = tape.scale(tape.sum(tape.mul(z_var, z_var)), 1.0 / len(idx))
        loss = tape.add(data_mean, tape.scale(prior_mean, cfg.lambda_lat))

        data_val = float(data_mean.value)
        prior_val = float(prior_mean.value)
        if not np.isfinite(data_val + prior_val):
            if out_dir:
                last_good.save(out_dir / "last_good.ckpt")
            raise TrainingError(
                f"non-finite loss at step {step}"
                + (f"; last good checkpoint in {out_dir}" if out_dir else "")
            )

        tape.backward(loss)
        adam_step(hyper.params, psi_var.grad, psi_state, lr=cfg.lr)
        grad_lat = np.zeros_like(latents)
        grad_lat[idx] = z_var.grad
        _adam_rows(latents, grad_lat, m_lat, v_lat, t_lat, idx, cfg.lr)

        curve.steps.append(step)
        curve.data_loss.append(data_val)
        curve.prior_loss.append(prior_val)

        if step % cfg.validate_every == 0 or step == cfg.steps:
            probe = int(idx[0])
            params = hyper.generate_params(latents[probe])
            val = _validation_psnr(lfn_spec, params, records[probe])
            curve.val_steps.append(step)
            curve.val_psnr.append(val)
            last_good = snapshot(step)
            if not quiet:
                elapsed = time.perf_counter() - t_start
                print(
                    f"step {step}/{cfg.steps} data={data_val:.5f} prior={prior_val:.4f} "
                    f"val_psnr={val:.2f} ({elapsed:.0f}s)",
                    flush=True,
                )
            if out_dir:
                curve.save(out_dir / "loss_log.txt")
                if checkpoint_every and step % checkpoint_every == 0:
                    last_good.save(out_dir / f"ckpt_{step:06d}.ckpt")

    ckpt = snapshot(cfg.steps)
    if out_dir:
        ckpt.save(out_dir / "prior.ckpt")
        curve.save(out_dir / "loss_log.txt")
    return ckpt, curve


@_blas_single_thread
def train_scene(images, cameras, cfg: TrainConfig, lfn_spec: MlpSpec | None = None,
                out_dir=None, quiet: bool = True):
    """Fit one field directly (no hypernetwork) to views of a single scene.

    ``images``: (V, H, W, 3) floats in [0, 1]; ``cameras``: matching list.
    Returns ``(Checkpoint, LossCurve)``.
    """
    lfn_spec = lfn_spec or default_lfn_spec()
    images = np.asarray(images, dtype=np.float32)
    rng = np.random.default_rng(cfg.seed)
    v, h, w, _ = images.shape
    rays = np.stack(
        [rays_from_camera(c).reshape(-1, 6).astype(np.float32) for c in cameras]
    )
    targets = encode_image(images).reshape(v, h * w, 3).astype(np.float32)

    params = init_params(lfn_spec, rng)
    state = AdamState.like(params)
    curve = LossCurve()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(1, cfg.steps + 1):
        vi = rng.integers(v, size=cfg.ray_batch_size)
        pi = rng.integers(h * w, size=cfg.ray_batch_size)
        tape = Tape()
        p_var = tape.leaf(params)
        pred = mlp_forward(lfn_spec, p_var, tape.leaf(rays[vi, pi]), tape)
        diff = tape.sub(pred, tape.leaf(targets[vi, pi]))
        loss = tape.mean(tape.mul(diff, diff))
        data_val = float(loss.value)
        if not np.isfinite(data_val):
            raise TrainingError(f"non-finite loss at step {step}")
        tape.backward(loss)
        adam_step(params, p_var.grad, state, lr=cfg.lr)
        curve.steps.append(step)
        curve.data_loss.append(data_val)
        curve.prior_loss.append(0.0)
        if step % cfg.validate_every == 0 or step == cfg.steps:
            pred0 = decode_radiance(mlp_forward(lfn_spec, params, rays[0]))
            val = psnr(pred0.reshape(images[0].shape), images[0])
            curve.val_steps.append(step)
            curve.val_psnr.append(val)
            if not quiet:
                print(f"step {step}/{cfg.steps} data={data_val:.6f} val_psnr={val:.2f}",
                      flush=True)

    ckpt = Checkpoint(lfn_spec=lfn_spec, step=cfg.steps, arrays={"lfn_params": params})
    if out_dir:
        ckpt.save(out_dir / "scene.ckpt")
        curve.save(out_dir / "loss_log.txt")
    return ckpt, curve


@_blas_single_thread
def infer_latent(checkpoint: Checkpoint, observations, cfg: InferConfig,
                 progress=None):
    """Reconstruct a field for a new scene from posed observations.

    The hypernetwork stays frozen; only a fresh latent code (initialized at
    the prior mean, zero) is optimized against the given ``(image, camera)``
    pair or list of pairs.  Returns ``(z, LfnModel, LossCurve)``;
    ``progress(step, total)`` is called after every step when given.
    """
    hyper = checkpoint.hypernetwork()
    if isinstance(observations, tuple) and isinstance(observations[1], Camera):
        observations = [observations]
    rays_all = []
    targets_all = []
    for image, cam in observations:
        image = np.asarray(image, dtype=np.float32)
        if image.shape[:2] != (cam.height, cam.width):
            raise ValueError(
                f"observation is {image.shape[1]}x{image.shape[0]}, camera expects "
                f"{cam.width}x{cam.height}"
            )
        rays_all.append(rays_from_camera(cam).reshape(-1, 6).astype(np.float32))
        targets_all.append(encode_image(image).reshape(-1, 3).astype(np.float32))
    rays = np.concatenate(rays_all)
    targets = np.concatenate(targets_all)

    rng = np.random.default_rng(cfg.seed)
    z = np.zeros(hyper.latent_dim, dtype=np.float32)
    state = AdamState.like(z)
    curve = LossCurve()
    for step in range(1, cfg.steps + 1):
        pick = rng.integers(len(rays), size=min(cfg.ray_batch_size, len(rays)))
        tape = Tape()
        z_var = tape.leaf(z[None, :])
        phi = tape.take_row(mlp_forward(hyper.spec, tape.leaf(hyper.params), z_var, tape), 0)
        pred = mlp_forward(checkpoint.lfn_spec, phi, tape.leaf(rays[pick]), tape)
        diff = tape.sub(pred, tape.leaf(targets[pick]))
        data_mean = tape.mean(tape.mul(diff, diff))
        prior = tape.sum(tape.mul(z_var, z_var))
        loss = tape.add(data_mean, tape.scale(prior, cfg.lambda_lat))
        data_val = float(data_mean.value)
        if not np.isfinite(data_val):
            raise TrainingError(f"non-finite loss at inference step {step}")
        tape.backward(loss)
        adam_step(z, z_var.grad[0], state, lr=cfg.lr)
        curve.steps.append(step)
        curve.data_loss.append(data_val)
        curve.prior_loss.append(float(prior.value))
        if progress is not None:
            progress(step, cfg.steps)

    model = LfnModel(checkpoint.lfn_spec, hyper.generate_params(z))
    return z, model, curve
