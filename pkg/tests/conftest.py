import os

# single-threaded BLAS before numpy loads: small-matrix workload
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import pytest

from ehrjepa.records import build_vocabulary
from ehrjepa.simulate import config_for_regime, generate_cohort


@pytest.fixture(scope="session")
def small_cohort():
    cfg = config_for_regime("chronic", n_patients=80, seed=42)
    records, latents = generate_cohort(cfg)
    return cfg, records, latents


@pytest.fixture(scope="session")
def small_vocab(small_cohort):
    _, records, _ = small_cohort
    return build_vocabulary(records)
