"""Hot numerical kernels.

The compiled extension ``_ckernels`` is used when it has been built;
otherwise the numpy implementations in ``_fallback`` are used. Setting the
environment variable ``FNGUIDED_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("FNGUIDED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

jacobi_eigh_batch = _impl.jacobi_eigh_batch
symmetric_epipolar_distances = _impl.symmetric_epipolar_distances
count_inliers = _impl.count_inliers
wstd_forward = _impl.wstd_forward
wstd_backward = _impl.wstd_backward
channel_gate_forward = _impl.channel_gate_forward
channel_gate_backward = _impl.channel_gate_backward
affine_relu_forward = _impl.affine_relu_forward
affine_relu_backward = _impl.affine_relu_backward

__all__ = ["BACKEND", "jacobi_eigh_batch", "symmetric_epipolar_distances",
           "count_inliers",
           "wstd_forward", "wstd_backward", "channel_gate_forward",
           "channel_gate_backward", "affine_relu_forward", "affine_relu_backward"]
