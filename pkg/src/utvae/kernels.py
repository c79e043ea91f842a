"""Backend selection for the ball-tree query kernels.

The compiled extension is used when it imports and ``UTVAE_PURE_PYTHON`` is
not set to a true value; otherwise the pure-Python module is used.
"""

import os

from . import _kernels_py as python_backend

try:
    from . import _kernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None


def _want_pure():
    return os.environ.get("UTVAE_PURE_PYTHON", "").strip().lower() in {"1", "true", "yes"}


def get_backend(name=None):
    """Return a kernel module: ``"compiled"``, ``"python"`` or ``None`` for the default."""
    if name == "python":
        return python_backend
    if name == "compiled":
        if compiled_backend is None:
            raise ImportError("compiled kernels are not built (run `pip install -e .`)")
        return compiled_backend
    if name is not None:
        raise ValueError(f"unknown backend {name!r}")
    if compiled_backend is None or _want_pure():
        return python_backend
    return compiled_backend


BACKEND = "compiled" if get_backend() is compiled_backend else "python"
