"""Capsule-network image segmentation with locally-constrained dynamic routing."""

import os as _os

# Cap BLAS threads before numpy loads anywhere downstream; numba threads are
# capped in kernels at import. A single thread also gives bitwise-reproducible
# training runs.
_threads = _os.environ.get("CAPSROUTE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)


def _tune_malloc():
    # The training loop churns through large short-lived arrays; glibc hands
    # those back to the kernel on free, so every iteration re-faults pages.
    # Keeping big blocks on the heap (no mmap, no trim) makes them reusable.
    # Best effort; opt out with CAPSROUTE_NO_MALLOC_TUNING=1.
    if _os.environ.get("CAPSROUTE_NO_MALLOC_TUNING"):
        return
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)  # M_MMAP_MAX
        libc.mallopt(-1, 2**31 - 1)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_malloc()

from .tensor import (  # noqa: E402
    DetachedGraphError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    set_default_dtype,
    tape,
    using_dtype,
)
from .layers import (  # noqa: E402
    CapsuleGrid,
    RoutingState,
    TransformKernel,
    conv_capsule,
    deconv_capsule,
    masked_reconstruct,
    perturb_capsule,
    predict,
    route,
    routing_softmax,
    segmentation_readout,
    squash,
)
from .losses import (  # noqa: E402
    LossWeights,
    dice,
    masked_mse,
    median_aggregate,
    weighted_bce,
    weighted_margin,
)
from .model import (  # noqa: E402
    ConfigError,
    LayerSpec,
    Model,
    ModelConfig,
    PRESET_NAMES,
    build,
    count_unet_params,
    preset,
    report_reduction,
)

__version__ = "0.1.0"

__all__ = [
    "CapsuleGrid", "ConfigError", "DetachedGraphError", "LayerSpec",
    "LossWeights", "Model", "ModelConfig", "PRESET_NAMES", "RoutingState",
    "ShapeError", "Tensor", "TransformKernel", "backward", "build",
    "conv_capsule", "count_unet_params", "deconv_capsule", "dice",
    "masked_mse", "masked_reconstruct", "median_aggregate", "no_grad",
    "perturb_capsule", "predict", "preset", "report_reduction", "route",
    "routing_softmax", "segmentation_readout", "set_default_dtype", "squash",
    "tape", "using_dtype", "weighted_bce", "weighted_margin",
]
