"""Kernel backend selection.

Two interchangeable backends implement the hot inner loops (attention, layer
norm, GELU, AdamW): a Cython extension compiled at install time and the numpy
fallback. Selection happens once at import:

  * ``EHRJEPA_KERNELS=compiled`` - require the extension, fail if missing;
  * ``EHRJEPA_KERNELS=numpy``    - force the fallback;
  * unset / ``auto``             - use the extension when importable.

The compiled kernels only handle contiguous float32 arrays; other dtypes
(the float64 finite-difference harness in particular) are routed to the
numpy implementations regardless of the active backend.
"""

import os

import numpy as np

from . import _npkernels

_choice = os.environ.get("EHRJEPA_KERNELS", "auto").lower()
_ck = None
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels as _ck
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "EHRJEPA_KERNELS=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation` or "
                "`python setup.py build_ext --inplace`"
            )
        _ck = None
elif _choice != "numpy":
    raise ValueError(f"EHRJEPA_KERNELS must be auto|compiled|numpy, got {_choice!r}")

BACKEND = "compiled" if _ck is not None else "numpy"


def _f32c(*arrays):
    return all(a.dtype == np.float32 and a.flags.c_contiguous for a in arrays)


# numpy's SIMD tanh beats a scalar compiled loop, so GELU always routes to
# the numpy implementation; the compiled variant stays available for the
# benchmark comparison
def gelu_fwd(x):
    return _npkernels.gelu_fwd(x)


def gelu_bwd(x, dy):
    return _npkernels.gelu_bwd(x, dy)


def layernorm_fwd(x, g, b, eps):
    if _ck is not None and _f32c(x, g, b):
        return _ck.layernorm_fwd(x, g, b, eps)
    return _npkernels.layernorm_fwd(x, g, b, eps)


def layernorm_bwd(x, g, mean, rstd, dy):
    if _ck is not None and _f32c(x, g, mean, rstd, dy):
        return _ck.layernorm_bwd(x, g, mean, rstd, dy)
    return _npkernels.layernorm_bwd(x, g, mean, rstd, dy)


def mha_fwd(q, k, v, n_heads, causal):
    if _ck is not None and _f32c(q, k, v):
        return _ck.mha_fwd(q, k, v, n_heads, causal)
    return _npkernels.mha_fwd(q, k, v, n_heads, causal)


def mha_bwd(q, k, v, probs, dout, n_heads, causal):
    if _ck is not None and _f32c(q, k, v, probs, dout):
        return _ck.mha_bwd(q, k, v, probs, dout, n_heads, causal)
    return _npkernels.mha_bwd(q, k, v, probs, dout, n_heads, causal)


def adamw_update(p, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    if _ck is not None and _f32c(p, grad, m, v):
        _ck.adamw_update(p, grad, m, v, t, lr, beta1, beta2, eps, weight_decay)
    else:
        _npkernels.adamw_update(p, grad, m, v, t, lr, beta1, beta2, eps, weight_decay)
