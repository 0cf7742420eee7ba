"""The light field MLP, its latent-code hypernetwork, and checkpoint IO.

A field maps 6-vector Plucker rays to RGB radiance in a symmetric value
space (targets are ``pixel * 2 - 1``); decoding maps back to [0, 1].
Rendering one ray costs exactly one MLP evaluation, and every evaluation is
counted so the single-evaluation claim is checkable.

Checkpoints are a human-readable header (magic line + one JSON line), a
blank line, the declared float32 little-endian arrays back to back, and a
trailing 8-byte checksum of the payload.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var
from .nn import MlpSpec, init_params, mlp_forward, unpack_params
from .rays import validate_rays

CHECKPOINT_MAGIC = "LFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint IO failures."""


class CheckpointFormatError(CheckpointError):
    """Header is not parseable."""


class CheckpointVersionError(CheckpointError):
    """File was written by an incompatible format version."""


class CheckpointTruncatedError(CheckpointError):
    """Payload is shorter than the header declares."""


class CheckpointChecksumError(CheckpointError):
    """Payload bytes do not match the trailing checksum."""


def default_lfn_spec(pe_freqs: int = 0, hidden_dim: int = 256) -> MlpSpec:
    """6-layer ReLU MLP with layer norm from Plucker 6-vectors to RGB."""
    return MlpSpec(
        input_dim=6,
        hidden_dim=hidden_dim,
        output_dim=3,
        num_layers=6,
        layer_norm=True,
        positional_encoding_frequencies=pe_freqs,
    )


def default_hyper_spec(latent_dim: int, target_count: int, hidden_dim: int = 256) -> MlpSpec:
    """3-layer ReLU MLP with layer norm from latent codes to LFN parameters."""
    return MlpSpec(
        input_dim=latent_dim,
        hidden_dim=hidden_dim,
        output_dim=target_count,
        num_layers=3,
        layer_norm=True,
        positional_encoding_frequencies=0,
    )


def decode_radiance(values):
    """Value space -> [0, 1] RGB."""
    return np.clip((np.asarray(values) + 1.0) * 0.5, 0.0, 1.0)


def encode_image(rgb):
    """[0, 1] RGB -> zero-centered training targets."""
    return np.asarray(rgb) * 2.0 - 1.0


class LfnModel:
    """A light field network: spec + flat float32 parameter vector.

    The parameter vector is treated as immutable once the model is built;
    concurrent queries are safe.  ``eval_count`` tracks the number of network
    evaluations (one per ray) ever run through this instance.
    """

    def __init__(self, spec: MlpSpec, params: np.ndarray):
        if spec.output_dim != 3:
            raise ValueError("light field networks output RGB (3 channels)")
        if spec.input_dim != 6:
            raise ValueError("light field networks take Plucker 6-vectors")
        params = np.ascontiguousarray(params, dtype=np.float32)
        if params.shape != (spec.param_count(),):
            raise ValueError(
                f"parameter vector has shape {params.shape}, "
                f"spec needs ({spec.param_count()},)"
            )
        self.spec = spec
        self.params = params
        self._count_lock = threading.Lock()
        self.eval_count = 0

    def _count(self, n: int):
        with self._count_lock:
            self.eval_count += n

    def query_radiance(self, rays, validate: bool = True):
        """Value-space radiance for a ``(batch, 6)`` array of rays.

        Exactly one MLP evaluation per ray.  Use :func:`decode_radiance` for
        [0, 1] colors.
        """
        rays = np.asarray(rays)
        flat = rays.reshape(-1, 6)
        if validate:
            bad = validate_rays(flat)
            if len(bad):
                raise ValueError(
                    f"invalid rays (non-unit direction or d.m != 0) at indices "
                    f"{bad[:8].tolist()}{'...' if len(bad) > 8 else ''}"
                )
        out = mlp_forward(self.spec, self.params, flat.astype(np.float32))
        self._count(flat.shape[0])
        return out.reshape(rays.shape[:-1] + (3,))

    def query_radiance_tape(self, rays, tape: Tape):
        """Tape-recorded query (float dtype follows the ray array); used for
        input-gradient extraction.  Also counted as one evaluation per ray."""
        rays = np.asarray(rays)
        inputs = tape.leaf(rays.reshape(-1, 6))
        params = tape.leaf(self.params.astype(rays.dtype, copy=False))
        out = mlp_forward(self.spec, params, inputs, tape)
        self._count(rays.reshape(-1, 6).shape[0])
        return out, inputs


@dataclass
class Hypernetwork:
    """MLP sending a latent code to a full LFN parameter vector."""

    spec: MlpSpec
    params: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.spec.input_dim

    @property
    def target_count(self) -> int:
        return self.spec.output_dim

    def generate_params(self, z: np.ndarray) -> np.ndarray:
        """phi = Psi(z); pure function of (params, z)."""
        z = np.asarray(z, dtype=np.float32)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent must have shape ({self.latent_dim},), got {z.shape}")
        out = mlp_forward(self.spec, self.params, z[None, :])
        return np.ascontiguousarray(out[0])

    def generate_params_tape(self, z_batch, tape: Tape) -> Var:
        """Tape-recorded batched generation: (S, k) latents -> (S, l) params."""
        params = tape._as_var(self.params)
        return mlp_forward(self.spec, params, z_batch, tape)


def init_hypernetwork(lfn_spec: MlpSpec, latent_dim: int, rng: np.random.Generator,
                      hidden_dim: int = 256) -> Hypernetwork:
    """Initialize so that every latent initially maps to one shared, sensibly
    initialized LFN: final layer weights zero, final bias a fan-in init phi0."""
    target = lfn_spec.param_count()
    spec = default_hyper_spec(latent_dim, target, hidden_dim)
    params = init_params(spec, rng)
    layers = unpack_params(spec, params)
    W_last, b_last, _, _ = layers[-1]
    W_last[:] = 0.0
    b_last[:] = init_params(lfn_spec, rng)
    return Hypernetwork(spec=spec, params=params)


@dataclass
class LatentTable:
    """Per-scene latent codes plus the Gaussian-prior weight."""

    codes: np.ndarray  # (N, k) float32
    lambda_lat: float = 1e-3

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.float32)
        if self.codes.ndim != 2:
            raise ValueError("latent table must be (n_scenes, latent_dim)")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("latent table contains non-finite entries")
        if self.lambda_lat < 0:
            raise ValueError("prior weight must be non-negative")

    @classmethod
    def zeros(cls, n_scenes: int, latent_dim: int, lambda_lat: float = 1e-3):
        return cls(np.zeros((n_scenes, latent_dim), dtype=np.float32), lambda_lat)


def _spec_to_dict(spec: MlpSpec | None):
    if spec is None:
        return None
    return {
        "input_dim": spec.input_dim,
        "hidden_dim": spec.hidden_dim,
        "output_dim": spec.output_dim,
        "num_layers": spec.num_layers,
        "layer_norm": spec.layer_norm,
        "positional_encoding_frequencies": spec.positional_encoding_frequencies,
    }


def _spec_from_dict(d):
    return None if d is None else MlpSpec(**d)


@dataclass
class Checkpoint:
    """Serializable training state: the LFN spec plus any of a direct
    parameter vector, hypernetwork parameters, and a latent table."""

    lfn_spec: MlpSpec
    step: int = 0
    hyper_spec: MlpSpec | None = None
    lambda_lat: float | None = None
    arrays: dict = field(default_factory=dict)  # name -> float32 array

    ARRAY_ORDER = ("hyper_params", "latents", "lfn_params")

    def __post_init__(self):
        for name in self.arrays:
            if name not in self.ARRAY_ORDER:
                raise ValueError(f"unknown checkpoint array {name!r}")
            self.arrays[name] = np.ascontiguousarray(self.arrays[name], dtype=np.float32)

    # -- convenience views ---------------------------------------------------

    @property
    def n_scenes(self) -> int:
        lat = self.arrays.get("latents")
        return 0 if lat is None else lat.shape[0]

    @property
    def latent_dim(self) -> int | None:
        return None if self.hyper_spec is None else self.hyper_spec.input_dim

    def hypernetwork(self) -> Hypernetwork:
        if self.hyper_spec is None or "hyper_params" not in self.arrays:
            raise CheckpointError("checkpoint holds no hypernetwork")
        return Hypernetwork(self.hyper_spec, self.arrays["hyper_params"])

    def latent_table(self) -> LatentTable:
        if "latents" not in self.arrays:
            raise CheckpointError("checkpoint holds no latent table")
        return LatentTable(self.arrays["latents"], self.lambda_lat or 0.0)

    def lfn_model(self, scene: int | None = None) -> LfnModel:
        """Model for a training scene index, or for the direct parameter
        vector when ``scene`` is None."""
        if scene is None:
            if "lfn_params" not in self.arrays:
                raise CheckpointError("checkpoint holds no direct LFN parameters")
            return LfnModel(self.lfn_spec, self.arrays["lfn_params"])
        hyper = self.hypernetwork()
        codes = self.latent_table().codes
        if not 0 <= scene < len(codes):
            raise CheckpointError(f"scene index {scene} out of range [0, {len(codes)})")
        return LfnModel(self.lfn_spec, hyper.generate_params(codes[scene]))

    def model_from_latent(self, z: np.ndarray) -> LfnModel:
        return LfnModel(self.lfn_spec, self.hypernetwork().generate_params(z))

    # -- serialization ---------------------------------------------------------

    def save(self, path):
        ordered = [n for n in self.ARRAY_ORDER if n in self.arrays]
        header = {
            "format_version": CHECKPOINT_VERSION,
            "step": self.step,
            "lfn_spec": _spec_to_dict(self.lfn_spec),
            "hyper_spec": _spec_to_dict(self.hyper_spec),
            "lambda_lat": self.lambda_lat,
            "lfn_param_count": self.lfn_spec.param_count(),
            "n_scenes": self.n_scenes,
            "arrays": [
                {"name": n, "shape": list(self.arrays[n].shape)} for n in ordered
            ],
        }
        payload = b"".join(
            self.arrays[n].astype("<f4", copy=False).tobytes() for n in ordered
        )
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        with open(path, "wb") as f:
            f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            f.write(b"\n")
            f.write(payload)
            f.write(digest)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as f:
            magic = f.readline().decode("utf-8", "replace").strip()
            parts = magic.split()
            if len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC:
                raise CheckpointFormatError(f"not a checkpoint file: {magic!r}")
            if int(parts[1]) != CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"format version {parts[1]} unsupported (want {CHECKPOINT_VERSION})"
                )
            try:
                header = json.loads(f.readline().decode())
            except json.JSONDecodeError as e:
                raise CheckpointFormatError(f"bad header: {e}") from e
            if f.readline().strip():
                raise CheckpointFormatError("missing blank line after header")
            blob = f.read()
        counts = [int(np.prod(a["shape"])) for a in header["arrays"]]
        payload_len = 4 * sum(counts)
        if len(blob) < payload_len + 8:
            raise CheckpointTruncatedError(
                f"payload has {len(blob)} bytes, header declares {payload_len} + 8 checksum"
            )
        payload, digest = blob[:payload_len], blob[payload_len : payload_len + 8]
        if hashlib.blake2b(payload, digest_size=8).digest() != digest:
            raise CheckpointChecksumError("payload checksum mismatch")
        arrays = {}
        offset = 0
        for entry, count in zip(header["arrays"], counts):
            raw = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            arrays[entry["name"]] = raw.reshape(entry["shape"]).copy()
            offset += 4 * count
        return cls(
            lfn_spec=_spec_from_dict(header["lfn_spec"]),
            step=header["step"],
            hyper_spec=_spec_from_dict(header["hyper_spec"]),
            lambda_lat=header["lambda_lat"],
            arrays=arrays,
        )
