"""Gaussian splatting avatars with front/back positional maps and a face branch."""
import os

# numba probes TBB first and warns when the installed one is too old
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
