"""Kernel backend selection.

The compiled extension is used when it was built; otherwise, or when
``RANDBAL_PURE_PYTHON=1`` is set, the numpy/pure-Python kernels are used.
Both expose ``jacobi_eigh``, ``swap_chains`` and ``irls_logistic``.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("RANDBAL_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = active.BACKEND

jacobi_eigh = active.jacobi_eigh
swap_chains = active.swap_chains
irls_logistic = active.irls_logistic

__all__ = ["BACKEND", "jacobi_eigh", "swap_chains", "irls_logistic",
           "python_backend", "compiled_backend"]
