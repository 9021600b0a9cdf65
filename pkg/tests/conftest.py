"""Pin BLAS to one thread before numpy loads: the acceptance budget is a
single CPU core, and fixed threading keeps runs bit-reproducible."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
