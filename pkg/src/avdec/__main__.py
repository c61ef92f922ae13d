import os
import sys

# keep BLAS single-threaded so repeated runs reduce in the same order
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from avdec.cli import main

sys.exit(main())
