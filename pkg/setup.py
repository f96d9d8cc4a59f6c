"""Build script for the optional compiled kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile must not fail the install.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "mixrec._kernels._core",
                ["src/mixrec/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"warning: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
