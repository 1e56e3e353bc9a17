"""Backend switch for the compiled kernels.

Set ``SCADAVAE_NUMBA=0`` before import to force the pure-numpy path.
"""
import os

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

_flag = os.environ.get("SCADAVAE_NUMBA", "1").strip().lower()
NUMBA_AVAILABLE = _nb is not None
USE_NUMBA = NUMBA_AVAILABLE and _flag not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator."""
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return _nb.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda func: func
