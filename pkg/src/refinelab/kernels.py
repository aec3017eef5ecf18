"""Hot-loop kernels, compiled when available.

The Cython extension is used unless it failed to build or ``REFINELAB_PURE=1``
is set, in which case the numpy fallback is loaded. The random stream,
im2col/col2im and max-pooling agree bit for bit; batch-norm reductions are
summed in a different order and agree to rounding only.
"""

import os

BACKEND = "python"

if os.environ.get("REFINELAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from refinelab._kernels import (  # noqa: F401
            bn_backward,
            bn_train_forward,
            col2im,
            im2col,
            maxpool2x2_backward,
            maxpool2x2_forward,
            xoshiro_fill,
        )

        BACKEND = "cython"
    except ImportError:
        pass

if BACKEND == "python":
    from refinelab._kernels_py import (  # noqa: F401
        bn_backward,
        bn_train_forward,
        col2im,
        im2col,
        maxpool2x2_backward,
        maxpool2x2_forward,
        xoshiro_fill,
    )

__all__ = [
    "BACKEND",
    "bn_backward",
    "bn_train_forward",
    "col2im",
    "im2col",
    "maxpool2x2_backward",
    "maxpool2x2_forward",
    "xoshiro_fill",
]
