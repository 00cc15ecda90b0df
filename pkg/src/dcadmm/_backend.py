"""Select the compiled kernels when available, the pure-Python ones otherwise.

Set ``DCADMM_PURE=1`` to force the fallback.
"""

import os

if os.environ.get("DCADMM_PURE", "").strip() not in ("", "0"):
    from . import _pykernels as kernels
    NAME = "python"
else:
    try:
        from . import _ckernels as kernels
        NAME = "cython"
    except ImportError:
        from . import _pykernels as kernels
        NAME = "python"

icm_sweeps = kernels.icm_sweeps
swap_pass = kernels.swap_pass
maxflow_bfs = kernels.maxflow_bfs
residual_reachable = kernels.residual_reachable
