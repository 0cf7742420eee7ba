"""Reference numpy implementation of the forward kernel (any float dtype)."""

import numpy as np

from ..autodiff import LAYER_NORM_EPS


def mlp_forward_numpy(x, layers, use_layer_norm):
    """Forward through packed ``(W, b, gain, ln_bias)`` layers.

    Hidden layers: affine, optional layer norm, ReLU.  Final layer: affine.
    """
    h = x
    last = len(layers) - 1
    for i, (W, b, gain, ln_bias) in enumerate(layers):
        z = h @ W + b
        if i < last:
            if use_layer_norm:
                mean = z.mean(axis=-1, keepdims=True)
                z -= mean
                var = np.mean(z * z, axis=-1, keepdims=True)
                z *= 1.0 / np.sqrt(var + np.asarray(LAYER_NORM_EPS, dtype=z.dtype))
                z *= gain
                z += ln_bias
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h
