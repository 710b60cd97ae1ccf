"""Select the compiled sampler kernels, falling back to numpy.

Set ``DOSESHRINK_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _want_python() -> bool:
    return os.environ.get("DOSESHRINK_PURE_PYTHON", "").strip().lower() in ("1", "true", "yes")


def get_backend(name: str | None = None):
    """Return the kernel module: ``"cython"``, ``"python"`` or the default."""
    if name is None:
        name = "python" if (_want_python() or _compiled is None) else "cython"
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown backend {name!r}")


def available() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


BACKEND = "cython" if (_compiled is not None and not _want_python()) else "python"
