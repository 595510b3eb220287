"""Backend selection for the hot convolution kernels.

Two implementations of the composite-convolution kernels exist: a numba
``@njit`` version (default when numba imports) and a pure-numpy fallback.
Selection order:

1. ``set_backend("numba" | "numpy")`` at runtime,
2. the ``DCNET_BACKEND`` environment variable,
3. auto: numba if importable, else numpy.

Both backends compute the same sums; they may differ in the last few ulps
because of summation order.  Each backend is individually deterministic,
including across thread counts: every output element is produced by a
single serially-accumulated reduction.
"""

from __future__ import annotations

import os
import warnings

_FORCED: str | None = None
_NUMBA_OK: bool | None = None


def _numba_available() -> bool:
    global _NUMBA_OK
    if _NUMBA_OK is None:
        try:
            import numba  # noqa: F401

            _NUMBA_OK = True
        except ImportError:
            _NUMBA_OK = False
    return _NUMBA_OK


def set_backend(name: str | None):
    """Force a backend ('numba', 'numpy') or reset to env/auto with None."""
    global _FORCED
    if name not in (None, "numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _numba_available():
        raise RuntimeError("numba backend requested but numba is not importable")
    _FORCED = name


def active_backend() -> str:
    if _FORCED is not None:
        return _FORCED
    env = os.environ.get("DCNET_BACKEND", "auto").lower()
    if env == "numpy":
        return "numpy"
    if env == "numba":
        if not _numba_available():
            raise RuntimeError("DCNET_BACKEND=numba but numba is not importable")
        return "numba"
    if env not in ("", "auto"):
        warnings.warn(f"ignoring unknown DCNET_BACKEND={env!r}; using auto")
    return "numba" if _numba_available() else "numpy"


def set_num_threads(n: int):
    """Cap worker threads for the numba backend; no-op for pure numpy."""
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if _numba_available():
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
