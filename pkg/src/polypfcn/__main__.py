import os
import sys

# BLAS thread pools are sized at import time, so this must run before numpy loads
_threads = os.environ.get("POLYPFCN_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

from .cli import main  # noqa: E402

sys.exit(main())
