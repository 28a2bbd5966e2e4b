"""Hot kernels: BFS distance fields, path descent, DTW and line of sight.

The compiled extension is used when importable; otherwise, or when the
environment variable ``CAPFUZZ_PURE_PYTHON`` is set to a non-empty value
other than ``0``, the pure-Python fallback is selected. ``BACKEND`` names
the active implementation.
"""
import os

from . import _pykernels as python

_force_python = os.environ.get("CAPFUZZ_PURE_PYTHON", "") not in ("", "0")

compiled = None
if not _force_python:
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

bfs_field = _impl.bfs_field
descend = _impl.descend
dtw = _impl.dtw
line_clear = _impl.line_clear
lines_clear = _impl.lines_clear

__all__ = [
    "BACKEND",
    "bfs_field",
    "compiled",
    "descend",
    "dtw",
    "line_clear",
    "lines_clear",
    "python",
]
