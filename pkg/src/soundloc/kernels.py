"""Selects the compiled kernel backend when importable, else the numpy fallback."""
import os

if os.environ.get("SOUNDLOC_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as _impl
        BACKEND = "python"

assign_nearest = _impl.assign_nearest
best_surjective_map = _impl.best_surjective_map
