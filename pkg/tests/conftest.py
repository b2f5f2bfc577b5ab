"""Pin BLAS to one thread before numpy loads.

Keeps results bitwise reproducible and avoids CPU oversubscription when
tests fork worker pools. Must run before any numpy import, which pytest
guarantees by importing conftest first.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
