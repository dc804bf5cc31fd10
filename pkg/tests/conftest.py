import os

# Pin BLAS threading before numpy loads so collective results and timing
# comparisons are stable regardless of the host's core count.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
os.environ.setdefault("MPLCONFIGDIR", "/tmp/mplconfig")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
