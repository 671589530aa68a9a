"""Hot row-wise kernels with a compiled backend and a numpy fallback.

The compiled module (``_ckernels``, built from Cython) is used when it
imports; otherwise the numpy versions in ``_pykernels`` are bound.  Kernels
the compiled module does not define fall back to numpy one by one: GELU
(numpy's vectorized exp is faster than scalar libm) and attention (batched
BLAS matmul).  Setting
``ASLORA_KERNELS=python`` in the environment forces the fallback.  Callers
must look kernels up through this module (``kernels.softmax_fwd``) so that
:func:`use_backend` can rebind them at runtime.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNEL_NAMES = (
    "softmax_fwd",
    "softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "running_mean_update",
    "pairwise_l2",
    "attention_fwd",
    "attention_bwd",
)

BACKEND = "python"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def backend_module(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_kernels() -> list[str]:
    """Kernel names the compiled module implements natively."""
    if _ckernels is None:
        return []
    return [k for k in KERNEL_NAMES if hasattr(_ckernels, k)]


def use_backend(name: str) -> None:
    """Rebind every kernel in this namespace to backend ``name``."""
    global BACKEND
    mod = backend_module(name)
    g = globals()
    for k in KERNEL_NAMES:
        g[k] = getattr(mod, k, None) or getattr(_pykernels, k)
    BACKEND = name


_requested = os.environ.get("ASLORA_KERNELS", "").strip().lower()
if _requested == "python" or _ckernels is None:
    use_backend("python")
else:
    use_backend("cython")
