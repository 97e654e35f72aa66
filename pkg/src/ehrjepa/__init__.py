"""Joint SFT + JEPA latent-trajectory training over longitudinal
health-event records, with a leakage-safe point-in-time evaluation harness
and a synthetic cohort generator whose ground-truth dynamics are known."""

import os

# The workload is many small matmuls; BLAS thread pools spin-wait and lose
# badly there. Only effective if numpy has not been imported yet.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
