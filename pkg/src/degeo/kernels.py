"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``DEGEO_PURE_PYTHON=1``
to force the pure-Python kernels.
"""

import os

from . import _kernels_py

_FORCE_PURE = os.environ.get("DEGEO_PURE_PYTHON", "").strip() not in ("", "0")

if _FORCE_PURE:
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "compiled"

KernelError = _kernels_py.KernelError
TABLE_WIDTH = _kernels_py.TABLE_WIDTH
NB, SX, SXX, NFULL, NSINGLE, COEF = (_kernels_py.NB, _kernels_py.SX, _kernels_py.SXX,
                                      _kernels_py.NFULL, _kernels_py.NSINGLE, _kernels_py.COEF)

candidate_log_weights = _impl.candidate_log_weights
sigma2_collapsed_log_weights = _impl.sigma2_collapsed_log_weights
shape_lgamma = _kernels_py.shape_lgamma
sample_log_weights = _impl.sample_log_weights
run_gibbs = _impl.run_gibbs
farthest_ends = _impl.farthest_ends
rho_grid = _kernels_py.rho_grid
rho_log_density = _kernels_py.rho_log_density


def backends():
    """Both kernel modules keyed by name; ``compiled`` is absent if not built."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        out["compiled"] = _kernels
    return out
