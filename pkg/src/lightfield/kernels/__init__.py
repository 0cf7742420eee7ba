"""Inference kernels for the MLP forward pass.

Two interchangeable implementations: a pure-numpy reference and a compiled
Cython extension that fuses bias add, layer norm and ReLU between BLAS
matmuls.  The active one is chosen at import time; set ``LIGHTFIELD_KERNEL``
to ``numpy`` or ``cython`` to force a choice (``cython`` raises if the
extension was not built).

Training and gradient paths do not go through here -- only the forward-only
hot loop used by rendering, EPI sampling and the ray-march baseline.
"""

import os

from .npkernels import mlp_forward_numpy

_choice = os.environ.get("LIGHTFIELD_KERNEL", "auto").lower()

if _choice == "numpy":
    _fast = None
elif _choice in ("auto", "cython"):
    try:
        from . import _fastkernels as _fast
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "LIGHTFIELD_KERNEL=cython but the compiled extension is missing; "
                "rebuild the package or unset the variable"
            )
        _fast = None
else:
    raise ValueError(f"unknown LIGHTFIELD_KERNEL value {_choice!r}")

ACTIVE = "cython" if _fast is not None else "numpy"


def mlp_forward_f32(x, layers, use_layer_norm):
    """Float32 forward through packed ``(W, b, gain, ln_bias)`` layers."""
    if _fast is not None:
        return _fast.mlp_forward_f32(x, layers, use_layer_norm)
    return mlp_forward_numpy(x, layers, use_layer_norm)
