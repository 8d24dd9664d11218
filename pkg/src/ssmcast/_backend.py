"""Select the compiled kernels when importable, else the numpy fallback.

Set ``SSMCAST_PURE_PYTHON=1`` to force the fallback.
"""

import os

from ssmcast import _kernels_py

if os.environ.get("SSMCAST_PURE_PYTHON", "") not in ("", "0"):
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from ssmcast import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"

KernelLinAlgError = _kernels_py.KernelLinAlgError

__all__ = ["kernels", "BACKEND", "KernelLinAlgError"]
