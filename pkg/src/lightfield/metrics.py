"""Image quality metrics, depth error, and the rendering cost benchmark.

PSNR is computed on [0, 1] float images before any 8-bit quantization.
SSIM uses one fixed variant (11x11 Gaussian window, sigma 1.5, K1=0.01,
K2=0.03, dynamic range 1.0, valid windows only, channels averaged), kept in
a single configuration record so alternates can be benchmarked against it.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; identical images
    report the 99 dB cap instead of infinity."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


def _gaussian_taps(cfg: SsimConfig):
    half = cfg.window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * cfg.sigma**2))
    return g / g.sum()


def _window_filter(img, taps):
    half = len(taps) // 2
    out = correlate1d(img, taps, axis=0)
    out = correlate1d(out, taps, axis=1)
    return out[half:-half, half:-half]


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean local structural similarity over fully interior windows."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < cfg.window or a.shape[1] < cfg.window:
        raise ValueError(
            f"images must be at least {cfg.window}x{cfg.window} for SSIM"
        )
    taps = _gaussian_taps(cfg)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _window_filter(x, taps)
        mu_y = _window_filter(y, taps)
        xx = _window_filter(x * x, taps) - mu_x * mu_x
        yy = _window_filter(y * y, taps) - mu_y * mu_y
        xy = _window_filter(x * y, taps) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


@dataclass
class DepthErrorResult:
    mean_l1: float  # NaN when no valid pixels
    valid_fraction: float
    n_valid: int

    @property
    def no_valid_pixels(self) -> bool:
        return self.n_valid == 0


def depth_l1(pred, oracle) -> DepthErrorResult:
    """Mean absolute depth error over the prediction's valid pixels.

    ``pred`` is a SparseDepthMap (or any object with ``depth`` and ``valid``
    grids); ``oracle`` a matching depth grid in the same parameterization.
    """
    oracle = np.asarray(oracle, dtype=np.float64)
    if pred.depth.shape != oracle.shape:
        raise ValueError(f"depth shapes differ: {pred.depth.shape} vs {oracle.shape}")
    mask = pred.valid & np.isfinite(oracle)
    n = int(mask.sum())
    if n == 0:
        return DepthErrorResult(float("nan"), 0.0, 0)
    err = float(np.mean(np.abs(pred.depth[mask].astype(np.float64) - oracle[mask])))
    return DepthErrorResult(err, float(mask.mean()), n)


# -- reports ---------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.17g}"


@dataclass
class MetricReport:
    """Per-image metric entries plus recomputable aggregates."""

    images: list = field(default_factory=list)  # (name, psnr, ssim)
    depths: list = field(default_factory=list)  # (name, mean_l1, valid_fraction)
    eval_counts: dict = field(default_factory=dict)
    wall_times_ms: dict = field(default_factory=dict)

    def add_image(self, name: str, psnr_db: float, ssim_val: float):
        self.images.append((name, float(psnr_db), float(ssim_val)))

    def add_depth(self, name: str, mean_l1: float, valid_fraction: float):
        self.depths.append((name, float(mean_l1), float(valid_fraction)))

    def mean_psnr(self) -> float:
        return float(np.mean([e[1] for e in self.images])) if self.images else float("nan")

    def mean_ssim(self) -> float:
        return float(np.mean([e[2] for e in self.images])) if self.images else float("nan")

    def to_text(self) -> str:
        lines = ["LFREPORT 1"]
        for name, p, s in self.images:
            lines.append(f"image {name} psnr {_fmt(p)} ssim {_fmt(s)}")
        for name, l1, vf in self.depths:
            lines.append(f"depth {name} mean_l1 {_fmt(l1)} valid_fraction {_fmt(vf)}")
        for key, count in sorted(self.eval_counts.items()):
            lines.append(f"evals {key} {count}")
        for key, ms in sorted(self.wall_times_ms.items()):
            lines.append(f"wall_ms {key} {_fmt(ms)}")
        if self.images:
            lines.append(f"aggregate mean_psnr {_fmt(self.mean_psnr())} "
                         f"mean_ssim {_fmt(self.mean_ssim())}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        lines = text.strip().splitlines()
        if not lines or lines[0] != "LFREPORT 1":
            raise ValueError("not a metric report")
        report = cls()
        declared = None
        for line in lines[1:]:
            parts = line.split()
            if parts[0] == "image":
                report.add_image(parts[1], float(parts[3]), float(parts[5]))
            elif parts[0] == "depth":
                report.add_depth(parts[1], float(parts[3]), float(parts[5]))
            elif parts[0] == "evals":
                report.eval_counts[parts[1]] = int(parts[2])
            elif parts[0] == "wall_ms":
                report.wall_times_ms[parts[1]] = float(parts[2])
            elif parts[0] == "aggregate":
                declared = (parts[2], parts[4])
        if declared is not None:
            recomputed = (_fmt(report.mean_psnr()), _fmt(report.mean_ssim()))
            if declared != recomputed:
                raise ValueError(
                    f"aggregate mismatch: declared {declared}, recomputed {recomputed}"
                )
        return report


# -- rendering cost benchmark ------------------------------------------------------


@dataclass
class BenchReport:
    resolution: int
    kernel: str
    lfn_ms: float
    lfn_evals: int
    baseline_ms: float
    baseline_evals: int
    samples_per_ray: int

    @property
    def wall_ratio(self) -> float:
        return self.baseline_ms / self.lfn_ms

    @property
    def eval_ratio(self) -> float:
        return self.baseline_evals / self.lfn_evals

    def to_text(self) -> str:
        return (
            f"LFBENCH 1\n"
            f"resolution {self.resolution}\n"
            f"kernel {self.kernel}\n"
            f"samples_per_ray {self.samples_per_ray}\n"
            f"lfn ms {_fmt(self.lfn_ms)} evals {self.lfn_evals}\n"
            f"baseline ms {_fmt(self.baseline_ms)} evals {self.baseline_evals}\n"
            f"ratio wall {_fmt(self.wall_ratio)} evals {_fmt(self.eval_ratio)}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "BenchReport":
        lines = text.strip().splitlines()
        if not lines or lines[0] != "LFBENCH 1":
            raise ValueError("not a bench report")
        fields_ = {}
        for line in lines[1:]:
            parts = line.split()
            fields_[parts[0]] = parts[1:]
        return cls(
            resolution=int(fields_["resolution"][0]),
            kernel=fields_["kernel"][0],
            samples_per_ray=int(fields_["samples_per_ray"][0]),
            lfn_ms=float(fields_["lfn"][1]),
            lfn_evals=int(fields_["lfn"][3]),
            baseline_ms=float(fields_["baseline"][1]),
            baseline_evals=int(fields_["baseline"][3]),
        )


def bench_rendering(model, cam, baseline_spec, baseline_params, runs: int = 5) -> BenchReport:
    """Median-of-``runs`` wall times and exact evaluation counts for the
    field render vs. the ray-marching baseline at identical resolution and
    MLP width."""
    from . import kernels
    from .render import render, render_volumetric_baseline

    lfn_times = []
    lfn_evals = 0
    for _ in range(runs):
        frame = render(model, cam)
        lfn_times.append(frame.wall_time * 1e3)
        lfn_evals = frame.eval_count
    base_times = []
    base_evals = 0
    for _ in range(runs):
        frame = render_volumetric_baseline(baseline_spec, baseline_params, cam)
        base_times.append(frame.wall_time * 1e3)
        base_evals = frame.eval_count
    return BenchReport(
        resolution=cam.width,
        kernel=kernels.ACTIVE,
        lfn_ms=statistics.median(lfn_times),
        lfn_evals=lfn_evals,
        baseline_ms=statistics.median(base_times),
        baseline_evals=base_evals,
        samples_per_ray=baseline_spec.samples_per_ray,
    )


def bench_kernels(hidden_dim: int = 256, num_layers: int = 6, batch: int = 4096,
                  runs: int = 7):
    """Microbenchmark of the forward kernel implementations.

    Returns ``{name: microseconds per pass}`` for the numpy reference and,
    when built, the compiled kernel.
    """
    from . import kernels
    from .nn import MlpSpec, init_params, positional_encode, unpack_params

    spec = MlpSpec(input_dim=6, hidden_dim=hidden_dim, output_dim=3,
                   num_layers=num_layers, layer_norm=True)
    rng = np.random.default_rng(0)
    params = init_params(spec, rng)
    layers = unpack_params(spec, params)
    x = np.ascontiguousarray(
        positional_encode(rng.standard_normal((batch, 6)).astype(np.float32), 0)
    )

    def timeit(fn):
        fn(x, layers, True)  # warm up
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            fn(x, layers, True)
            times.append((time.perf_counter() - t0) * 1e6)
        return statistics.median(times)

    results = {"numpy": timeit(kernels.mlp_forward_numpy)}
    if kernels._fast is not None:
        results["cython"] = timeit(kernels._fast.mlp_forward_f32)
    return results
