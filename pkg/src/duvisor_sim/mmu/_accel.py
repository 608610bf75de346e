"""Select the compiled kernels when available.

Set ``DUVISOR_SIM_PURE=1`` to force the pure-Python fallback.
"""

import os

BACKEND = "python"

if os.environ.get("DUVISOR_SIM_PURE", "") not in ("1", "true", "yes"):
    try:
        from duvisor_sim.mmu._kernels import pmc_covered, walk  # noqa: F401

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

if BACKEND == "python":
    from duvisor_sim.mmu._pykernels import pmc_covered, walk  # noqa: F401

from duvisor_sim.mmu._pykernels import (  # noqa: E402,F401
    WALK_NODE_PMC,
    WALK_OK,
    WALK_UNMAPPED,
)
