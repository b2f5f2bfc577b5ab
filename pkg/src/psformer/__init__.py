"""Point-cloud recognition with attention-based condensation and
position-to-structure layers, on a self-contained float64 autodiff engine."""

import os as _os
import sys as _sys

# Parallelism lives at the process level (PSF_THREADS worker processes);
# BLAS is pinned to one thread for reproducible sums and to avoid
# oversubscription. Only effective when numpy has not been loaded yet, and
# explicit user settings always win.
if "numpy" not in _sys.modules:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")


def _tune_allocator():
    # The working set cycles ~256 KB tensors, exactly glibc's default
    # mmap/trim thresholds; without this every temporary is an
    # mmap/munmap round trip (measured 4-5x slowdown on element-wise ops).
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass  # non-glibc platform; purely a performance knob


_tune_allocator()

from .errors import (ConfigError, ContractError, DegeneracyError,
                     DimensionError, FormatError, NumericError, ParseError,
                     PSFormerError)
from .tensor import ComputeGraph, Tensor, backward, grad_check
from .model import (Model, ModelConfig, build, cross_entropy_loss, forward,
                    forward_classify, forward_multi_scale, forward_segment,
                    load_checkpoint, save_checkpoint)

__version__ = "0.1.0"
