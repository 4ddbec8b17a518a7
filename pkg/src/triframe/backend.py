"""Kernel backend selection.

The compiled Cython kernels are used when the extension was built; otherwise
the numpy fallback is loaded. ``TRIFRAME_BACKEND=python`` forces the fallback,
``TRIFRAME_BACKEND=cython`` makes a missing extension an import error.
"""

import contextlib
import importlib
import logging
import os

logger = logging.getLogger(__name__)

_MODULES = {"cython": "triframe._ckernels", "python": "triframe._pykernels"}
KERNELS = (
    "im2col", "col2im", "conv_forward", "conv_backward", "leaky_relu", "leaky_relu_backward",
    "filter_valid", "filter_valid_adjoint", "ssim_moments", "ssim_moments_adjoint",
    "ssim_maps", "ssim_map_grad",
)


def load(name):
    """Import and return the kernel module registered under ``name``."""
    if name not in _MODULES:
        raise ValueError(f"unknown backend {name!r}; expected one of {sorted(_MODULES)}")
    module = importlib.import_module(_MODULES[name])
    missing = [k for k in KERNELS if not hasattr(module, k)]
    if missing:
        # a stale build from an older source tree
        raise ImportError(f"{module.__name__} lacks {missing}; rebuild the extension")
    return module


def available():
    names = []
    for name in _MODULES:
        try:
            load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select():
    requested = os.environ.get("TRIFRAME_BACKEND", "auto").strip().lower()
    if requested in ("", "auto"):
        try:
            return "cython", load("cython")
        except ImportError:
            logger.info("compiled kernels unavailable; using numpy fallback")
            return "python", load("python")
    return requested, load(requested)


name, kernels = _select()


def set_backend(new_name):
    global name, kernels
    kernels = load(new_name)
    name = new_name


@contextlib.contextmanager
def use_backend(new_name):
    """Temporarily switch the active kernels (tests and benchmarks)."""
    old = name
    set_backend(new_name)
    try:
        yield kernels
    finally:
        set_backend(old)
