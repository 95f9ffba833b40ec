"""``python -m focalcvae``"""

import os
import sys

if len(sys.argv) > 1 and sys.argv[1] == "bench":
    # BLAS reads these once at import time, so pin before numpy loads.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")

from focalcvae.cli import main  # noqa: E402

sys.exit(main())
