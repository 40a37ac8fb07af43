"""Build script: compiles the Cython kernel core when possible.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed compile degrades to a warning, not an error.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "pgfusion._kernels",
                sources=["src/pgfusion/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    sys.stderr.write(
        f"warning: Cython kernel build skipped ({exc}); "
        "pgfusion will run on the NumPy fallback\n"
    )

setup(ext_modules=ext_modules)
