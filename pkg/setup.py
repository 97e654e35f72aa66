"""Build script. The compiled kernel extension is optional: if Cython or a C
compiler is unavailable the package installs pure-Python and falls back to the
numpy kernels at import time (see ehrjepa.kernels)."""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "ehrjepa.kernels._ckernels",
                sources=["src/ehrjepa/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"ehrjepa: skipping compiled kernels ({exc}); numpy fallback will be used")

setup(ext_modules=ext_modules)
