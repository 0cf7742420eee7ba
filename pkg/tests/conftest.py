import numpy as np
import pytest

from lightfield.model import Checkpoint, init_hypernetwork
from lightfield.nn import MlpSpec, init_params
from lightfield.scenes import ProceduralScene, Sphere, generate_scene, render_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """2 train + 1 heldout scene, 3 views each at 16x16, with oracle depth."""
    root = tmp_path_factory.mktemp("dataset")
    scenes = [generate_scene(s) for s in (11, 12, 13)]
    return render_dataset(
        scenes, views_per_scene=3, resolution=16, out_dir=root,
        splits=["train", "train", "heldout"], seeds=[11, 12, 13],
    )


@pytest.fixture(scope="session")
def sphere_scene():
    return ProceduralScene(
        primitives=(Sphere((0.0, 0.0, 0.0), 0.5, (0.85, 0.35, 0.25)),),
        background=(0.06, 0.08, 0.1),
    )


def small_lfn_spec(pe: int = 0, hidden: int = 16, layers: int = 3) -> MlpSpec:
    return MlpSpec(input_dim=6, hidden_dim=hidden, output_dim=3,
                   num_layers=layers, layer_norm=True,
                   positional_encoding_frequencies=pe)


@pytest.fixture(scope="session")
def tiny_meta_checkpoint():
    """Untrained but structurally complete prior checkpoint (2 latents)."""
    rng = np.random.default_rng(7)
    lfn_spec = small_lfn_spec()
    hyper = init_hypernetwork(lfn_spec, latent_dim=8, rng=rng, hidden_dim=16)
    latents = rng.normal(scale=0.1, size=(2, 8)).astype(np.float32)
    return Checkpoint(
        lfn_spec=lfn_spec, step=0, hyper_spec=hyper.spec, lambda_lat=1e-3,
        arrays={
            "hyper_params": hyper.params,
            "latents": latents,
            "lfn_params": init_params(lfn_spec, rng),
        },
    )
