"""Self-supervised semantic scene completion on a verifiable numpy autodiff core."""

import os as _os
import sys as _sys

# honor the thread cap before numpy fixes its BLAS pool
_n = _os.environ.get("SEMFIELD_NUM_THREADS")
if _n and "numpy" not in _sys.modules:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _n)

__version__ = "0.1.0"

CHECKPOINT_FORMAT_VERSION = 1
GRID_FORMAT_VERSION = 1
